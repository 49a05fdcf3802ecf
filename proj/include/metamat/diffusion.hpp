#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metamat/rng.hpp"
#include "metamat/tensor.hpp"

namespace metamat {

// Denoiser contract used by the diffusion machinery. x: [B, ...]; t_steps:
// one diffusion step per batch sample; cond: per-sample conditioning tokens
// [B, F] (empty tensor means all-null); null_mask: per-sample null override.
struct Denoiser {
    virtual ~Denoiser() = default;
    virtual Tensor predict(const Tensor& x, const std::vector<std::size_t>& t_steps,
                           const Tensor& cond, const std::vector<std::uint8_t>& null_mask) = 0;
};

enum class ScheduleFamily { cosine, linear };

// All vectors are 1-based in t (index 0 holds the conventions beta_0 = 0,
// alpha_bar_0 = 1), so formulas read like their continuous counterparts.
struct DiffusionSchedule {
    ScheduleFamily family = ScheduleFamily::cosine;
    std::size_t T = 0;
    double beta_start = 1e-4, beta_end = 0.02;  // linear family only
    std::vector<double> betas, alphas, alpha_bars, posterior_variances;

    static DiffusionSchedule cosine(std::size_t T);
    static DiffusionSchedule linear(std::size_t T, double beta_start = 1e-4,
                                    double beta_end = 0.02);
    void validate() const;

    // Key=value lines; arrays are regenerated from the family parameters.
    std::string serialize() const;
    static DiffusionSchedule deserialize(const std::string& text);
};

struct SampleState {
    Tensor x;
    std::size_t t = 0;
};

struct GuidanceConfig {
    double weight = 0.0;
    double conditioning_dropout_prob = 0.1;

    void validate() const;
};

enum class LossType { l1, l2 };

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
Tensor forward_sample(const Tensor& x0, std::size_t t, const Tensor& noise,
                      const DiffusionSchedule& sched);

// Per-sample steps along the batch axis.
Tensor forward_sample_batch(const Tensor& x0, const std::vector<std::size_t>& t_steps,
                            const Tensor& noise, const DiffusionSchedule& sched);

// eps_cond + w (eps_cond - eps_uncond); exact identity at w = 0 and for
// equal inputs.
Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

// Posterior mean of x_{t-1} given x_t and the noise estimate.
Tensor reverse_mean(const SampleState& state, const Tensor& eps_hat,
                    const DiffusionSchedule& sched);

// One ancestral step; the final step (t = 1) adds no noise.
SampleState reverse_step(const SampleState& state, const Tensor& eps_hat,
                         const DiffusionSchedule& sched, Rng& rng);

// Per sample: t ~ U{1..T}, fresh noise, conditioning dropped to null with the
// configured probability; returns the mean elementwise deviation.
double training_loss(const Tensor& x0_batch, const Tensor& cond_batch, Denoiser& denoiser,
                     const DiffusionSchedule& sched, const GuidanceConfig& guidance, Rng& rng,
                     LossType loss_type = LossType::l1);

// Reverse chain from pure noise. The unconditional branch is evaluated only
// when w > 0, so w = 0 consumes the same rng stream as unconditional
// sampling.
Tensor sample(Denoiser& denoiser, const Tensor& cond, const DiffusionSchedule& sched,
              const GuidanceConfig& guidance, Rng& rng, const Shape& shape);

}  // namespace metamat
