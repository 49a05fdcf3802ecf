#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "metamat/autodiff.hpp"
#include "metamat/dataset.hpp"
#include "metamat/diffusion.hpp"
#include "metamat/tensor.hpp"
#include "metamat/unet.hpp"

namespace metamat {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

// Adam with bias-corrected moment estimates over a fixed parameter list.
// Parameters without an accumulated gradient are treated as having zero
// gradient, so their moments decay but fresh ones never move.
class Adam {
public:
    explicit Adam(std::vector<ag::Var> params, AdamConfig config = {});

    void zero_grad();
    void step();  // consumes gradients accumulated by ag::backward
    std::size_t steps_taken() const { return steps_; }

private:
    std::vector<ag::Var> params_;
    AdamConfig config_;
    std::vector<Tensor> m_, v_;
    std::size_t steps_ = 0;
};

// One conditioned example: normalized clean field stack plus the matching
// normalized effective-stress curve.
struct TrainingSample {
    Tensor x0;    // [F, C, H, W] in [-1, 1]
    Tensor cond;  // [F]
};

TrainingSample make_training_sample(const DatasetSample& sample, const NormalizationStats& stats);

struct TrainerConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 4;
    AdamConfig adam;
    GuidanceConfig guidance;  // only the dropout probability matters during training
    LossType loss = LossType::l1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainReport {
    std::vector<double> losses;  // one entry per optimizer step

    // Mean loss over the first / last `window` steps (clamped to the record).
    double mean_head(std::size_t window) const;
    double mean_tail(std::size_t window) const;
};

// Minimizes the noise-prediction objective on minibatches drawn with
// replacement. Per step the rng first draws the batch indices, then per slot
// the diffusion step, the noise field, and the conditioning-dropout coin --
// the same slot order as the scalar training loss, so a frozen net yields
// bit-identical loss values.
TrainReport train_denoiser(VideoUnet& net, const DiffusionSchedule& sched,
                           const std::vector<TrainingSample>& data, const TrainerConfig& config,
                           const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace metamat
