#include "metamat/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "metamat/errors.hpp"

namespace metamat {

double relative_l2(const double* pred, const double* truth, std::size_t n) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred[i] - truth[i];
        num += d * d;
        den += truth[i] * truth[i];
    }
    if (den == 0.0) throw UndefinedMetricError("reference has zero norm");
    return std::sqrt(num / den);
}

double nrmse(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("curve length mismatch");
    return relative_l2(pred.data(), truth.data(), truth.size());
}

double rel_l2_field(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape())
        throw std::invalid_argument("field shape mismatch");
    return relative_l2(pred.data(), truth.data(), truth.numel());
}

}  // namespace metamat
