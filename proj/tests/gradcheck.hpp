#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "metamat/autodiff.hpp"
#include "metamat/rng.hpp"

// Central finite differences against analytic gradients. `build` must
// construct a fresh graph from the given leaves and return a scalar root.
namespace gradcheck {

using metamat::Tensor;
using metamat::ag::Var;

struct Result {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

inline Result check(const std::function<Var(const std::vector<Var>&)>& build,
                    std::vector<Tensor> leaf_values, double h = 1e-6) {
    using namespace metamat::ag;
    std::vector<Var> leaves;
    for (auto& v : leaf_values) leaves.push_back(make_param(v));
    Var root = build(leaves);
    backward(root);

    Result res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const Tensor analytic = leaves[li]->grad;
        for (std::size_t i = 0; i < leaf_values[li].numel(); ++i) {
            const double orig = leaf_values[li][i];
            auto eval = [&](double v) {
                std::vector<Var> fresh;
                for (std::size_t k = 0; k < leaf_values.size(); ++k) {
                    Tensor t = leaf_values[k];
                    if (k == li) t[i] = v;
                    fresh.push_back(constant(std::move(t)));
                }
                NoGradGuard ng;
                return build(fresh)->value[0];
            };
            const double fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            const double an = analytic.numel() ? analytic[i] : 0.0;
            const double abs_err = std::fabs(fd - an);
            const double rel = abs_err / std::max({std::fabs(fd), std::fabs(an), 1e-8});
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            res.max_rel_err = std::max(res.max_rel_err, rel);
        }
    }
    return res;
}

inline Tensor random_tensor(metamat::Shape shape, metamat::Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace gradcheck
