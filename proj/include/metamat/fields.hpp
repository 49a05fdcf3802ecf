#pragma once

#include <cstddef>
#include <vector>

#include "metamat/tensor.hpp"

namespace metamat {

inline constexpr std::size_t kDefaultFrameCount = 11;
inline constexpr double kMaxStrain = 0.20;
inline constexpr double kFirstStrain = 0.002;

// Equidistant compression levels up to 20%, except the first frame sits at
// 0.2% instead of 0%. 11 frames gives 0.002, 0.02, 0.04, ..., 0.20.
std::vector<double> strain_levels_for(std::size_t frames);

// Lagrangian per-frame fields on the pixel grid. frames: [F, 3, H, W] with
// channel 0 = sigma22 (MPa, compression negative in memory), channel 1 = u1,
// channel 2 = u2 (pixel units). Void pixels carry exact zeros.
struct FieldSequence {
    Tensor frames;
    std::vector<double> strain_levels;

    std::size_t frame_count() const { return frames.dim(0); }
    std::size_t height() const { return frames.dim(2); }
    std::size_t width() const { return frames.dim(3); }

    double& at(std::size_t f, std::size_t ch, std::size_t i, std::size_t j) {
        return frames.at({f, ch, i, j});
    }
    double at(std::size_t f, std::size_t ch, std::size_t i, std::size_t j) const {
        return frames.at({f, ch, i, j});
    }
};

FieldSequence make_field_sequence(std::size_t frames, std::size_t height, std::size_t width);

// Effective vertical stress per strain level, compression negative in memory.
// Text reports negate to the compression-positive plotting convention.
struct StressStrainCurve {
    std::vector<double> sigma_eff;
};

}  // namespace metamat
