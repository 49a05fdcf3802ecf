#pragma once

#include <cstdint>
#include <vector>

#include "metamat/rng.hpp"
#include "metamat/tensor.hpp"

namespace metamat {

// Binary pixel grid, row-major, 1 = material, 0 = void.
struct BinaryGrid {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> cells;

    BinaryGrid() = default;
    BinaryGrid(std::size_t r, std::size_t c) : rows(r), cols(c), cells(r * c, 0) {}

    std::uint8_t& at(std::size_t i, std::size_t j) { return cells[i * cols + j]; }
    std::uint8_t at(std::size_t i, std::size_t j) const { return cells[i * cols + j]; }
    std::size_t count() const;
    double fill_fraction() const;
    bool operator==(const BinaryGrid&) const = default;
};

// 4-connected component labels: -1 for void pixels, 0..count-1 for material.
// wrap_x treats the first and last columns as adjacent (periodic cell).
struct ComponentLabels {
    std::vector<int> labels;
    int count = 0;
};
ComponentLabels connected_components(const BinaryGrid& grid, bool wrap_x = false);

struct GrfSpec {
    std::size_t grid_size = 48;       // pre-mirror quarter; mirrored cell is 2N x 2N
    double spectral_exponent = 3.0;
    double threshold_max = 0.6;
    double boundary_fraction = 0.10;  // required boundary coverage per side
    std::uint64_t rng_seed = 0;
    int max_attempts = 1000;

    void validate() const;  // throws std::invalid_argument
};

// Standardized N x N field: zero mean, unit population variance.
struct GrfField {
    Tensor values;
};

struct UnitCell {
    BinaryGrid pixels;       // 2N x 2N, mirror symmetric about both mid-lines
    double fill_fraction = 0.0;
    int rejections = 0;
};

// Spectral synthesis: complex Gaussian noise on the centered Fourier grid,
// amplitudes following |k|^(-alpha/2) with the zero mode muted, inverse DFT,
// real part, standardized.
GrfField sample_grf(const GrfSpec& spec);
GrfField sample_grf(const GrfSpec& spec, Rng& rng);

// pixel = 1 iff value > t (strict).
BinaryGrid threshold_field(const GrfField& field, double t);

// True iff one 4-connected material component touches at least
// floor(fraction * side) pixels on each of the four sides.
bool check_connectivity(const BinaryGrid& grid, double fraction);

// Rejection-sample a valid quarter, then mirror across the right edge and
// the bottom edge. Throws RetryBudgetError when max_attempts is exhausted.
UnitCell generate_unit_cell(const GrfSpec& spec);

BinaryGrid mirror_quarter(const BinaryGrid& quarter);

bool is_mirror_symmetric(const BinaryGrid& grid);

}  // namespace metamat
