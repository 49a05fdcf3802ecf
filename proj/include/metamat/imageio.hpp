#pragma once

#include <string>

#include "metamat/grf.hpp"
#include "metamat/tensor.hpp"

namespace metamat {

// Designs travel as plain-text PBM (P1): 1 = material. Reading accepts
// arbitrary whitespace and # comments per the format.
void write_pbm(const std::string& path, const BinaryGrid& grid);
BinaryGrid read_pbm(const std::string& path);

// Grayscale PGM (P2) of a [H, W] tensor: [lo, hi] maps linearly onto 0..255,
// values outside the range clamp.
void write_pgm(const std::string& path, const Tensor& img, double lo, double hi);

}  // namespace metamat
