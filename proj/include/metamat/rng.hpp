#pragma once

#include <cstdint>
#include <random>

#include "metamat/tensor.hpp"

namespace metamat {

// Deterministic RNG wrapper. All stochastic code in the library draws through
// this class so that a fixed seed reproduces runs bit-exactly on one platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() { return normal_(engine_); }

    std::uint64_t next_u64() { return engine_(); }

    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> d(lo, hi);
        return d(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    void fill_normal(Tensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = normal();
    }

    Tensor normal_tensor(Shape shape) {
        Tensor t(std::move(shape));
        fill_normal(t);
        return t;
    }

    // Decorrelated child seed for worker streams (splitmix64 step).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace metamat
