#include "metamat/grf.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "metamat/errors.hpp"

namespace metamat {

std::size_t BinaryGrid::count() const {
    std::size_t n = 0;
    for (auto c : cells) n += c;
    return n;
}

double BinaryGrid::fill_fraction() const {
    if (cells.empty()) return 0.0;
    return static_cast<double>(count()) / static_cast<double>(cells.size());
}

ComponentLabels connected_components(const BinaryGrid& grid, bool wrap_x) {
    const std::size_t R = grid.rows, C = grid.cols;
    ComponentLabels out;
    out.labels.assign(R * C, -1);
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < R * C; ++start) {
        if (!grid.cells[start] || out.labels[start] != -1) continue;
        const int label = out.count++;
        out.labels[start] = label;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const std::size_t i = p / C, j = p % C;
            std::size_t nbr[4] = {
                i > 0 ? p - C : p, i + 1 < R ? p + C : p,
                j > 0 ? p - 1 : p, j + 1 < C ? p + 1 : p};
            if (wrap_x) {
                if (j == 0) nbr[2] = p + C - 1;
                if (j + 1 == C) nbr[3] = p + 1 - C;
            }
            for (std::size_t q : nbr) {
                if (q == p) continue;
                if (grid.cells[q] && out.labels[q] == -1) {
                    out.labels[q] = label;
                    stack.push_back(q);
                }
            }
        }
    }
    return out;
}

void GrfSpec::validate() const {
    if (grid_size < 4 || grid_size % 2 != 0)
        throw std::invalid_argument("grid_size must be even and >= 4");
    if (!(spectral_exponent >= 0.0))
        throw std::invalid_argument("spectral_exponent must be >= 0");
    if (!(threshold_max >= 0.0 && threshold_max <= 1.0))
        throw std::invalid_argument("threshold_max must be in [0, 1]");
    if (!(boundary_fraction > 0.0 && boundary_fraction < 1.0))
        throw std::invalid_argument("boundary_fraction must be in (0, 1)");
    if (max_attempts < 1)
        throw std::invalid_argument("max_attempts must be >= 1");
}

GrfField sample_grf(const GrfSpec& spec) {
    Rng rng(spec.rng_seed);
    return sample_grf(spec, rng);
}

GrfField sample_grf(const GrfSpec& spec, Rng& rng) {
    spec.validate();
    const std::size_t N = spec.grid_size;
    const long half = static_cast<long>(N) / 2;
    std::vector<std::complex<double>> freq(N * N), out(N * N);

    for (long k1 = -half; k1 < half; ++k1) {
        for (long k2 = -half; k2 < half; ++k2) {
            const double re = rng.normal();
            const double im = rng.normal();
            double amp = 0.0;
            if (k1 != 0 || k2 != 0) {
                const double k2sum = static_cast<double>(k1 * k1 + k2 * k2);
                amp = std::pow(k2sum, -spec.spectral_exponent / 4.0);
            }
            const std::size_t i1 = static_cast<std::size_t>((k1 + static_cast<long>(N)) % static_cast<long>(N));
            const std::size_t i2 = static_cast<std::size_t>((k2 + static_cast<long>(N)) % static_cast<long>(N));
            freq[i1 * N + i2] = std::complex<double>(re * amp, im * amp);
        }
    }

    fftw_plan plan = fftw_plan_dft_2d(
        static_cast<int>(N), static_cast<int>(N),
        reinterpret_cast<fftw_complex*>(freq.data()),
        reinterpret_cast<fftw_complex*>(out.data()),
        FFTW_BACKWARD, FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);

    GrfField field{Tensor::zeros({N, N})};
    double* v = field.values.data();
    for (std::size_t p = 0; p < N * N; ++p) v[p] = out[p].real();

    const double mean = field.values.mean();
    double var = 0.0;
    for (std::size_t p = 0; p < N * N; ++p) {
        const double d = v[p] - mean;
        var += d * d;
    }
    var /= static_cast<double>(N * N);
    const double sd = std::sqrt(var);
    if (!(sd > 0.0)) throw std::runtime_error("degenerate field: zero variance");
    for (std::size_t p = 0; p < N * N; ++p) v[p] = (v[p] - mean) / sd;
    return field;
}

BinaryGrid threshold_field(const GrfField& field, double t) {
    const std::size_t R = field.values.dim(0), C = field.values.dim(1);
    BinaryGrid grid(R, C);
    const double* v = field.values.data();
    for (std::size_t p = 0; p < R * C; ++p) grid.cells[p] = v[p] > t ? 1 : 0;
    return grid;
}

bool check_connectivity(const BinaryGrid& grid, double fraction) {
    const std::size_t R = grid.rows, C = grid.cols;
    if (R == 0 || C == 0) return false;
    const auto comps = connected_components(grid);
    if (comps.count == 0) return false;
    const std::size_t need_h = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(C)));
    const std::size_t need_v = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(R)));

    std::vector<std::size_t> top(comps.count, 0), bottom(comps.count, 0),
        left(comps.count, 0), right(comps.count, 0);
    for (std::size_t j = 0; j < C; ++j) {
        if (int l = comps.labels[j]; l >= 0) ++top[l];
        if (int l = comps.labels[(R - 1) * C + j]; l >= 0) ++bottom[l];
    }
    for (std::size_t i = 0; i < R; ++i) {
        if (int l = comps.labels[i * C]; l >= 0) ++left[l];
        if (int l = comps.labels[i * C + C - 1]; l >= 0) ++right[l];
    }
    for (int l = 0; l < comps.count; ++l) {
        if (top[l] >= need_h && bottom[l] >= need_h && left[l] >= need_v && right[l] >= need_v)
            return true;
    }
    return false;
}

BinaryGrid mirror_quarter(const BinaryGrid& quarter) {
    const std::size_t N = quarter.rows;
    if (quarter.cols != N) throw std::invalid_argument("quarter must be square");
    BinaryGrid full(2 * N, 2 * N);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) {
            const std::uint8_t v = quarter.at(i, j);
            full.at(i, j) = v;
            full.at(i, 2 * N - 1 - j) = v;
        }
    }
    for (std::size_t i = N; i < 2 * N; ++i)
        for (std::size_t j = 0; j < 2 * N; ++j)
            full.at(i, j) = full.at(2 * N - 1 - i, j);
    return full;
}

bool is_mirror_symmetric(const BinaryGrid& grid) {
    const std::size_t R = grid.rows, C = grid.cols;
    if (R % 2 != 0 || C % 2 != 0) return false;
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j)
            if (grid.at(i, j) != grid.at(R - 1 - i, j) || grid.at(i, j) != grid.at(i, C - 1 - j))
                return false;
    return true;
}

UnitCell generate_unit_cell(const GrfSpec& spec) {
    spec.validate();
    Rng rng(spec.rng_seed);
    UnitCell cell;
    for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
        GrfField field = sample_grf(spec, rng);
        const double t = rng.uniform(0.0, spec.threshold_max);
        BinaryGrid quarter = threshold_field(field, t);
        if (!check_connectivity(quarter, spec.boundary_fraction)) continue;
        cell.pixels = mirror_quarter(quarter);
        cell.fill_fraction = cell.pixels.fill_fraction();
        cell.rejections = attempt;
        return cell;
    }
    throw RetryBudgetError("no valid unit cell within " + std::to_string(spec.max_attempts) + " attempts");
}

}  // namespace metamat
