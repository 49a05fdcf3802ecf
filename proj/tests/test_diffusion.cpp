#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "metamat/diffusion.hpp"
#include "metamat/errors.hpp"
#include "metamat/rng.hpp"

using namespace metamat;

namespace {

// Recovers the exact injected noise by inverting the closed-form forward map
// around a captured clean batch.
struct OracleStub : Denoiser {
    Tensor x0;
    const DiffusionSchedule* sched;
    double offset = 0.0;

    Tensor predict(const Tensor& x, const std::vector<std::size_t>& t_steps, const Tensor&,
                   const std::vector<std::uint8_t>&) override {
        const std::size_t B = x.dim(0);
        const std::size_t stride = x.numel() / B;
        Tensor eps = Tensor::zeros(x.shape());
        for (std::size_t s = 0; s < B; ++s) {
            const double a = std::sqrt(sched->alpha_bars[t_steps[s]]);
            const double b = std::sqrt(1.0 - sched->alpha_bars[t_steps[s]]);
            for (std::size_t i = s * stride; i < (s + 1) * stride; ++i)
                eps[i] = (x[i] - a * x0[i]) / b + offset;
        }
        return eps;
    }
};

struct ZeroStub : Denoiser {
    Tensor predict(const Tensor& x, const std::vector<std::size_t>&, const Tensor&,
                   const std::vector<std::uint8_t>&) override {
        return Tensor::zeros(x.shape());
    }
};

// Broadcasts the mean conditioning token so the output depends on whether the
// null mask fired.
struct CondStub : Denoiser {
    std::vector<std::vector<std::uint8_t>> seen_masks;
    std::vector<std::vector<std::size_t>> seen_steps;

    Tensor predict(const Tensor& x, const std::vector<std::size_t>& t_steps, const Tensor& cond,
                   const std::vector<std::uint8_t>& null_mask) override {
        seen_masks.push_back(null_mask);
        seen_steps.push_back(t_steps);
        const std::size_t B = x.dim(0);
        const std::size_t stride = x.numel() / B;
        Tensor out = Tensor::zeros(x.shape());
        if (cond.numel() == 0) return out;
        const std::size_t F = cond.numel() / B;
        for (std::size_t s = 0; s < B; ++s) {
            if (null_mask[s]) continue;
            double m = 0.0;
            for (std::size_t k = 0; k < F; ++k) m += cond[s * F + k];
            m /= static_cast<double>(F);
            for (std::size_t i = s * stride; i < (s + 1) * stride; ++i) out[i] = m;
        }
        return out;
    }
};

struct NanStub : Denoiser {
    Tensor predict(const Tensor& x, const std::vector<std::size_t>&, const Tensor&,
                   const std::vector<std::uint8_t>&) override {
        return Tensor::full(x.shape(), std::nan(""));
    }
};

}  // namespace

TEST_CASE("schedule invariants hold for both families") {
    for (const auto& sched :
         {DiffusionSchedule::cosine(1000), DiffusionSchedule::linear(500)}) {
        sched.validate();
        REQUIRE(sched.betas.size() == sched.T + 1);
        CHECK(sched.alpha_bars[0] == 1.0);
        long double prod = 1.0L;
        for (std::size_t t = 1; t <= sched.T; ++t) {
            CHECK(sched.betas[t] > 0.0);
            CHECK(sched.betas[t] < 1.0);
            CHECK(sched.alpha_bars[t] < sched.alpha_bars[t - 1]);
            CHECK(sched.alphas[t] * sched.alpha_bars[t - 1] == sched.alpha_bars[t]);
            prod *= 1.0L - static_cast<long double>(sched.betas[t]);
            CHECK(std::abs(static_cast<double>(prod) - sched.alpha_bars[t]) <=
                  1e-12 * sched.alpha_bars[t]);
        }
        CHECK(sched.alpha_bars[sched.T] < sched.alpha_bars[1]);
        CHECK(sched.alpha_bars[1] < 1.0);
    }
}

TEST_CASE("schedule serialization reproduces the arrays bitwise") {
    for (const auto& sched :
         {DiffusionSchedule::cosine(250), DiffusionSchedule::linear(100, 3e-4, 0.015)}) {
        const DiffusionSchedule back = DiffusionSchedule::deserialize(sched.serialize());
        REQUIRE(back.T == sched.T);
        CHECK(back.family == sched.family);
        for (std::size_t t = 0; t <= sched.T; ++t) {
            CHECK(back.betas[t] == sched.betas[t]);
            CHECK(back.alpha_bars[t] == sched.alpha_bars[t]);
        }
    }
}

TEST_CASE("forward map endpoints") {
    Rng rng(3);
    const Tensor x0 = rng.normal_tensor({2, 3});
    const Tensor noise = rng.normal_tensor({2, 3});

    DiffusionSchedule limit;  // hand-built: abar_1 = 1 models the t -> 0 limit
    limit.T = 1;
    limit.betas = {0.0, 0.0};
    limit.alphas = {1.0, 1.0};
    limit.alpha_bars = {1.0, 1.0};
    limit.posterior_variances = {0.0, 0.0};
    const Tensor same = forward_sample(x0, 1, noise, limit);
    for (std::size_t i = 0; i < x0.numel(); ++i) CHECK(same[i] == x0[i]);

    const auto sched = DiffusionSchedule::cosine(100);
    const Tensor zeros = Tensor::zeros({2, 3});
    const Tensor scaled = forward_sample(zeros, sched.T, noise, sched);
    const double b = std::sqrt(1.0 - sched.alpha_bars[sched.T]);
    for (std::size_t i = 0; i < noise.numel(); ++i) CHECK(scaled[i] == b * noise[i]);

    CHECK_THROWS_AS(forward_sample(x0, 1, Tensor::zeros({3, 2}), sched), std::invalid_argument);
    CHECK_THROWS_AS(forward_sample(x0, 0, noise, sched), std::invalid_argument);
    CHECK_THROWS_AS(forward_sample(x0, 101, noise, sched), std::invalid_argument);
}

TEST_CASE("forward map matches closed-form moments") {
    const auto sched = DiffusionSchedule::cosine(100);
    const std::size_t t = 50;
    const double x0v = 0.7;
    const Tensor x0 = Tensor::full({1, 1}, x0v);
    Rng rng(11);
    const int N = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int k = 0; k < N; ++k) {
        const Tensor xt = forward_sample(x0, t, rng.normal_tensor({1, 1}), sched);
        sum += xt[0];
        sumsq += xt[0] * xt[0];
    }
    const double mean = sum / N;
    const double var = sumsq / N - mean * mean;
    const double want_mean = std::sqrt(sched.alpha_bars[t]) * x0v;
    const double want_var = 1.0 - sched.alpha_bars[t];
    CHECK(std::abs(mean - want_mean) < 3.0 * std::sqrt(want_var / N));
    CHECK(std::abs(var - want_var) < 0.05 * want_var);
}

TEST_CASE("analytic inversion recovers the clean tensor at every step") {
    const auto sched = DiffusionSchedule::cosine(1000);
    Rng rng(13);
    const Tensor x0 = rng.normal_tensor({2, 3});
    for (std::size_t t : {std::size_t{1}, std::size_t{10}, std::size_t{250}, std::size_t{999}}) {
        const Tensor eps = rng.normal_tensor({2, 3});
        const Tensor xt = forward_sample(x0, t, eps, sched);
        const double a = std::sqrt(sched.alpha_bars[t]);
        const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
        for (std::size_t i = 0; i < x0.numel(); ++i)
            CHECK(std::abs((xt[i] - b * eps[i]) / a - x0[i]) < 1e-10);
    }
}

TEST_CASE("stepwise chain matches the closed-form marginal") {
    const auto sched = DiffusionSchedule::cosine(20);
    const std::size_t t = 10;
    const double x0v = -0.4;
    Rng rng(17);
    const int N = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int k = 0; k < N; ++k) {
        double x = x0v;
        for (std::size_t s = 1; s <= t; ++s)
            x = std::sqrt(sched.alphas[s]) * x + std::sqrt(sched.betas[s]) * rng.normal();
        sum += x;
        sumsq += x * x;
    }
    const double mean = sum / N;
    const double var = sumsq / N - mean * mean;
    const double want_mean = std::sqrt(sched.alpha_bars[t]) * x0v;
    const double want_var = 1.0 - sched.alpha_bars[t];
    CHECK(std::abs(mean - want_mean) < 3.0 * std::sqrt(want_var / N));
    CHECK(std::abs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / (N - 1.0)));
}

TEST_CASE("guided noise is the exact affine combination") {
    Rng rng(19);
    Tensor a = Tensor::zeros({2, 2}), b = Tensor::zeros({2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        a[i] = rng.uniform_int(-8, 8);
        b[i] = rng.uniform_int(-8, 8);
    }
    const Tensor id = guided_noise(a, b, 0.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(id[i] == a[i]);

    const Tensor same = guided_noise(a, a, 7.5);
    for (std::size_t i = 0; i < 4; ++i) CHECK(same[i] == a[i]);

    const Tensor one = Tensor::full({1}, 1.0), zero = Tensor::zeros({1});
    CHECK(guided_noise(one, zero, 5.0)[0] == 6.0);

    Tensor c = Tensor::zeros({2, 2}), d = Tensor::zeros({2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        c[i] = rng.uniform_int(-8, 8);
        d[i] = rng.uniform_int(-8, 8);
    }
    Tensor ac = a, bd = b;
    for (std::size_t i = 0; i < 4; ++i) {
        ac[i] += c[i];
        bd[i] += d[i];
    }
    const Tensor lhs1 = guided_noise(a, b, 3.0), lhs2 = guided_noise(c, d, 3.0);
    const Tensor rhs = guided_noise(ac, bd, 3.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(lhs1[i] + lhs2[i] == rhs[i]);

    CHECK_THROWS_AS(guided_noise(a, Tensor::zeros({3}), 1.0), std::invalid_argument);
}

TEST_CASE("single-step reverse chain inverts the forward map") {
    const auto sched = DiffusionSchedule::cosine(1);
    Rng rng(23);
    const Tensor x0 = rng.normal_tensor({2, 2});
    const Tensor eps = rng.normal_tensor({2, 2});
    const Tensor x1 = forward_sample(x0, 1, eps, sched);
    const SampleState out = reverse_step({x1, 1}, eps, sched, rng);
    CHECK(out.t == 0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out.x[i] - x0[i]) < 1e-6);
}

TEST_CASE("reverse step noise has the posterior std") {
    const auto sched = DiffusionSchedule::cosine(50);
    const std::size_t t = 30;
    Rng rng(29);
    const Tensor zero = Tensor::zeros({1});
    const int N = 100000;
    double sumsq = 0.0;
    for (int k = 0; k < N; ++k) {
        const SampleState out = reverse_step({zero, t}, zero, sched, rng);
        sumsq += out.x[0] * out.x[0];
    }
    const double want_sd = std::sqrt(sched.posterior_variances[t]);
    CHECK(std::abs(std::sqrt(sumsq / N) - want_sd) < 0.02 * want_sd);
}

TEST_CASE("posterior mean is deterministic and matches the formula") {
    const auto sched = DiffusionSchedule::cosine(50);
    Rng rng(31);
    const Tensor x = rng.normal_tensor({1, 3});
    const Tensor eps = rng.normal_tensor({1, 3});
    const std::size_t t = 5;
    const Tensor mu = reverse_mean({x, t}, eps, sched);
    for (std::size_t i = 0; i < 3; ++i) {
        const double want = (x[i] - sched.betas[t] / std::sqrt(1.0 - sched.alpha_bars[t]) * eps[i]) /
                            std::sqrt(sched.alphas[t]);
        CHECK(mu[i] == doctest::Approx(want).epsilon(1e-14));
    }
    const SampleState last = reverse_step({x, 1}, eps, sched, rng);
    const Tensor mu1 = reverse_mean({x, 1}, eps, sched);
    for (std::size_t i = 0; i < 3; ++i) CHECK(last.x[i] == mu1[i]);

    CHECK_THROWS_AS(reverse_mean({x, 0}, eps, sched), std::invalid_argument);
}

TEST_CASE("training loss on oracle stubs") {
    const auto sched = DiffusionSchedule::cosine(100);
    Rng data_rng(37);
    const Tensor x0 = data_rng.normal_tensor({4, 1, 4, 4});
    const Tensor cond = data_rng.normal_tensor({4, 2});
    GuidanceConfig guidance;
    guidance.conditioning_dropout_prob = 0.0;

    OracleStub oracle;
    oracle.x0 = x0;
    oracle.sched = &sched;
    Rng rng_a(41);
    CHECK(training_loss(x0, cond, oracle, sched, guidance, rng_a) < 1e-10);

    OracleStub shifted = oracle;
    shifted.offset = 1.0;
    Rng rng_b(41);
    CHECK(training_loss(x0, cond, shifted, sched, guidance, rng_b) ==
          doctest::Approx(1.0).epsilon(1e-10));

    ZeroStub zero;
    Rng rng_c(43);
    const Tensor big = data_rng.normal_tensor({16, 1, 8, 8});
    const double folded = training_loss(big, Tensor::zeros({16, 2}), zero, sched, guidance, rng_c);
    CHECK(folded > 0.5);
    CHECK(folded < 1.6);

    Rng rng_d(43);
    const double l2 = training_loss(big, Tensor::zeros({16, 2}), zero, sched, guidance, rng_d,
                                    LossType::l2);
    CHECK(l2 > 0.7);
    CHECK(l2 < 1.4);

    NanStub nan_stub;
    Rng rng_e(47);
    CHECK_THROWS_AS(training_loss(x0, cond, nan_stub, sched, guidance, rng_e), DivergenceError);
}

TEST_CASE("full conditioning dropout equals explicit null conditioning") {
    const auto sched = DiffusionSchedule::cosine(60);
    Rng data_rng(53);
    const Tensor x0 = data_rng.normal_tensor({3, 1, 2, 2});
    const Tensor cond = data_rng.normal_tensor({3, 4});

    CondStub stub_a, stub_b;
    GuidanceConfig drop_all;
    drop_all.conditioning_dropout_prob = 1.0;
    GuidanceConfig drop_none;
    drop_none.conditioning_dropout_prob = 0.0;

    Rng rng_a(59), rng_b(59);
    const double with_dropout = training_loss(x0, cond, stub_a, sched, drop_all, rng_a);
    const double with_null = training_loss(x0, Tensor::zeros({0}), stub_b, sched, drop_none, rng_b);
    CHECK(with_dropout == with_null);
    REQUIRE(stub_a.seen_masks.size() == 1);
    for (auto m : stub_a.seen_masks[0]) CHECK(m == 1);
    for (auto t : stub_a.seen_steps[0]) {
        CHECK(t >= 1);
        CHECK(t <= 60);
    }
}

TEST_CASE("sampling with a perfect single-step stub returns the clean tensor") {
    const auto sched = DiffusionSchedule::cosine(1);
    Rng data_rng(61);
    OracleStub oracle;
    oracle.x0 = data_rng.normal_tensor({2, 1, 2, 2});
    oracle.sched = &sched;
    Rng rng(67);
    const Tensor out = sample(oracle, Tensor::zeros({2, 1}), sched, GuidanceConfig{}, rng,
                              {2, 1, 2, 2});
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(std::abs(out[i] - oracle.x0[i]) < 1e-6);
}

TEST_CASE("zero guidance consumes the unconditional rng stream") {
    const auto sched = DiffusionSchedule::cosine(8);
    ZeroStub stub;
    GuidanceConfig guidance;  // w = 0
    Rng rng_a(71), rng_b(71);
    Rng cond_rng(73);
    const Tensor cond = cond_rng.normal_tensor({2, 3});
    const Tensor with_cond = sample(stub, cond, sched, guidance, rng_a, {2, 1, 2, 2});
    const Tensor without = sample(stub, Tensor::zeros({0}), sched, guidance, rng_b, {2, 1, 2, 2});
    for (std::size_t i = 0; i < with_cond.numel(); ++i) CHECK(with_cond[i] == without[i]);
}

TEST_CASE("sampler smoke test and divergence reporting") {
    const auto sched = DiffusionSchedule::cosine(10);
    ZeroStub stub;
    GuidanceConfig guidance;
    guidance.weight = 2.0;
    Rng rng(79);
    const Tensor out = sample(stub, Tensor::zeros({0}), sched, guidance, rng, {2, 2, 3, 4, 4});
    CHECK(out.shape() == Shape{2, 2, 3, 4, 4});
    CHECK(out.all_finite());

    NanStub nan_stub;
    Rng rng_b(83);
    try {
        sample(nan_stub, Tensor::zeros({0}), sched, guidance, rng_b, {1, 1, 2, 2});
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step_index == 10);
    }
}
