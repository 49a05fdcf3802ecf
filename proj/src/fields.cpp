#include "metamat/fields.hpp"

#include <stdexcept>

namespace metamat {

std::vector<double> strain_levels_for(std::size_t frames) {
    if (frames < 2) throw std::invalid_argument("need at least 2 strain levels");
    std::vector<double> levels(frames);
    levels[0] = kFirstStrain;
    for (std::size_t k = 1; k < frames; ++k)
        levels[k] = kMaxStrain * static_cast<double>(k) / static_cast<double>(frames - 1);
    return levels;
}

FieldSequence make_field_sequence(std::size_t frames, std::size_t height, std::size_t width) {
    FieldSequence seq;
    seq.frames = Tensor::zeros({frames, 3, height, width});
    seq.strain_levels = strain_levels_for(frames);
    return seq;
}

}  // namespace metamat
