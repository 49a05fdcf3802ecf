#pragma once

#include <cstddef>
#include <vector>

#include "metamat/tensor.hpp"

namespace metamat {

// sqrt(||pred - truth||^2 / ||truth||^2). Throws UndefinedMetricError when
// the truth norm is zero. Both public metrics reduce to this.
double relative_l2(const double* pred, const double* truth, std::size_t n);

double nrmse(const std::vector<double>& pred, const std::vector<double>& truth);

// Per-frame relative Frobenius error. Near-zero truth frames inflate the
// metric; callers report it per frame so the inflation stays visible.
double rel_l2_field(const Tensor& pred, const Tensor& truth);

}  // namespace metamat
