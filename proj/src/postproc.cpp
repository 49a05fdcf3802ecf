#include "metamat/postproc.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "metamat/dataset.hpp"
#include "metamat/errors.hpp"

namespace metamat {

UnitCell extract_topology(const FieldSequence& seq, double tolerance_fraction) {
    const std::size_t F = seq.frame_count(), H = seq.height(), W = seq.width();
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("extract_topology: field size must be even");
    if (!(tolerance_fraction >= 0.0))
        throw std::invalid_argument("extract_topology: tolerance must be non-negative");

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                const double v = seq.at(f, 2, i, j);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
    const double tol = tolerance_fraction * (hi - lo);

    BinaryGrid quarter(H / 2, W / 2);
    for (std::size_t i = 0; i < H / 2; ++i)
        for (std::size_t j = 0; j < W / 2; ++j) {
            bool material = false;
            for (std::size_t f = 0; f < F && !material; ++f)
                material = std::fabs(seq.at(f, 2, i, j)) > tol;
            quarter.at(i, j) = material ? 1 : 0;
        }

    BinaryGrid full = mirror_quarter(quarter);
    if (full.count() == 0)
        throw EmptyDesignError("extract_topology: displacement field marks every pixel void");

    const ComponentLabels comp = connected_components(full);
    std::vector<std::size_t> sizes(static_cast<std::size_t>(comp.count), 0);
    for (int label : comp.labels)
        if (label >= 0) ++sizes[static_cast<std::size_t>(label)];
    std::size_t best = 0;
    for (std::size_t s : sizes) best = std::max(best, s);
    for (std::size_t p = 0; p < full.cells.size(); ++p)
        if (full.cells[p] && sizes[static_cast<std::size_t>(comp.labels[p])] != best)
            full.cells[p] = 0;

    UnitCell cell;
    cell.pixels = std::move(full);
    cell.fill_fraction = cell.pixels.fill_fraction();
    return cell;
}

StressStrainCurve predict_curve(const FieldSequence& seq, const BinaryGrid& cell) {
    if (cell.rows != seq.height() || cell.cols != seq.width())
        throw std::invalid_argument("predict_curve: cell and field size mismatch");
    FieldSequence masked = seq;
    for (std::size_t f = 0; f < seq.frame_count(); ++f)
        for (std::size_t i = 0; i < seq.height(); ++i)
            for (std::size_t j = 0; j < seq.width(); ++j)
                if (!cell.at(i, j)) masked.at(f, 0, i, j) = 0.0;
    return curve_from_fields(masked);
}

Tensor to_eulerian(const FieldSequence& seq, const BinaryGrid* cell) {
    const std::size_t F = seq.frame_count(), H = seq.height(), W = seq.width();
    if (cell && (cell->rows != H || cell->cols != W))
        throw std::invalid_argument("to_eulerian: cell and field size mismatch");
    if (!seq.frames.all_finite())
        throw std::invalid_argument("to_eulerian: displacements must be finite");

    Tensor out = Tensor::zeros({F, H, W});
    std::vector<double> sum(H * W);
    std::vector<int> hits(H * W);
    for (std::size_t f = 0; f < F; ++f) {
        std::fill(sum.begin(), sum.end(), 0.0);
        std::fill(hits.begin(), hits.end(), 0);
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                if (cell && !cell->at(i, j)) continue;
                const double u1 = seq.at(f, 1, i, j);
                const double u2 = seq.at(f, 2, i, j);
                const long ti = std::lround(static_cast<double>(i) - u2);
                const long tj = std::lround(static_cast<double>(j) + u1);
                if (ti < 0 || tj < 0 || ti >= static_cast<long>(H) || tj >= static_cast<long>(W))
                    continue;
                const std::size_t p = static_cast<std::size_t>(ti) * W + static_cast<std::size_t>(tj);
                sum[p] += seq.at(f, 0, i, j);
                ++hits[p];
            }
        for (std::size_t p = 0; p < H * W; ++p)
            if (hits[p]) out[f * H * W + p] = sum[p] / hits[p];
    }
    return out;
}

}  // namespace metamat
