#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <cstdint>
#include <vector>

#include "metamat/fields.hpp"
#include "metamat/grf.hpp"

namespace metamat {

// Linear validator only: small-strain, plane-strain, bilinear pixel elements.
// Stands in for the nonlinear ground-truth solver; every output is an exact
// ray in the applied strain.
struct MaterialParams {
    double youngs_modulus = 100.0;  // MPa
    double poisson_ratio = 0.3;

    void validate() const;  // E > 0, -1 < nu < 0.5
};

// 8x8 plane-strain stiffness of one unit-square pixel element. Node order:
// counterclockwise from the lower-left corner, (u1, u2) interleaved.
Eigen::Matrix<double, 8, 8> element_stiffness(const MaterialParams& mat);

namespace fe {

enum class DofKind : std::uint8_t { inactive, free_dof, fixed_zero, platen_top };

// Node grid: (rows+1) x cols with the x direction periodic (node column
// wraps). Pixels not in a component spanning top to bottom carry no element
// and report zero fields. One u1 per node-connected group is pinned to kill
// the horizontal translation mode; nodes on the mirror axis are preferred so
// symmetric cells keep an antisymmetric u1 gauge.
struct AssembledSystem {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> included;      // per pixel
    std::vector<DofKind> kind;               // per dof, 2*(rows+1)*cols
    std::vector<std::ptrdiff_t> free_index;  // per dof, -1 unless free
    std::size_t n_free = 0;
    std::vector<std::size_t> element_pixels;
    Eigen::SparseMatrix<double> K;           // free-free block
    Eigen::Matrix<double, 8, 8> ke;

    std::size_t node_id(std::size_t r, std::size_t c) const { return r * cols + (c % cols); }
};

AssembledSystem assemble(const BinaryGrid& pixels, const MaterialParams& mat);

}  // namespace fe

struct FeSolution {
    Tensor sigma22;  // [H, W] element centroid values, compression negative
    Tensor u1, u2;   // [H, W] pixel-center averages
    double effective_stress = 0.0;  // top platen reaction / width
    double reaction_top = 0.0, reaction_bottom = 0.0;
};

// Uniform vertical compression: top nodes move down by strain*height, bottom
// nodes held, horizontal slip free on both platens.
FeSolution solve_compression(const BinaryGrid& pixels, const MaterialParams& mat,
                             double applied_strain);

struct SweepResult {
    FieldSequence fields;
    StressStrainCurve curve;
};

// One factorization, scaled along the strain ray.
SweepResult run_strain_sweep(const BinaryGrid& pixels, const MaterialParams& mat,
                             std::size_t frames = kDefaultFrameCount);

}  // namespace metamat
