#include "metamat/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "metamat/errors.hpp"

namespace metamat {

void AdamConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("adam lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0) throw std::invalid_argument("adam beta1 must lie in [0, 1)");
    if (beta2 < 0.0 || beta2 >= 1.0) throw std::invalid_argument("adam beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("adam eps must be positive");
}

Adam::Adam(std::vector<ag::Var> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    config_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.push_back(Tensor::zeros(p->value.shape()));
        v_.push_back(Tensor::zeros(p->value.shape()));
    }
}

void Adam::zero_grad() { ag::zero_grad(params_); }

void Adam::step() {
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        const bool live = p.has_grad();
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double g = live ? p.grad[i] : 0.0;
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
            p.value[i] -= config_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
        }
    }
}

TrainingSample make_training_sample(const DatasetSample& sample, const NormalizationStats& stats) {
    TrainingSample out;
    out.x0 = normalize_fields(sample.fields, stats).frames;
    const std::vector<double> c = normalize_curve(sample.curve.sigma_eff, stats);
    out.cond = Tensor::zeros({c.size()});
    std::copy(c.begin(), c.end(), out.cond.data());
    return out;
}

void TrainerConfig::validate() const {
    if (steps == 0) throw std::invalid_argument("trainer needs at least one step");
    if (batch_size == 0) throw std::invalid_argument("trainer batch size must be positive");
    adam.validate();
    guidance.validate();
}

double TrainReport::mean_head(std::size_t window) const {
    if (losses.empty()) throw std::logic_error("no losses recorded");
    const std::size_t n = std::min(window, losses.size());
    return std::accumulate(losses.begin(), losses.begin() + n, 0.0) / static_cast<double>(n);
}

double TrainReport::mean_tail(std::size_t window) const {
    if (losses.empty()) throw std::logic_error("no losses recorded");
    const std::size_t n = std::min(window, losses.size());
    return std::accumulate(losses.end() - n, losses.end(), 0.0) / static_cast<double>(n);
}

TrainReport train_denoiser(VideoUnet& net, const DiffusionSchedule& sched,
                           const std::vector<TrainingSample>& data, const TrainerConfig& config,
                           const std::function<void(std::size_t, double)>& on_step) {
    config.validate();
    sched.validate();
    if (data.empty()) throw std::invalid_argument("train_denoiser needs at least one sample");

    const DenoiserConfig& dc = net.config();
    const Shape want{dc.frames, dc.in_channels, dc.input_size, dc.input_size};
    for (const auto& s : data) {
        if (s.x0.shape() != want) throw std::invalid_argument("training sample shape mismatch");
        if (s.cond.numel() != dc.frames)
            throw std::invalid_argument("training conditioning length mismatch");
    }

    const std::size_t B = config.batch_size;
    Rng rng(config.seed);
    Adam opt(net.params().vars(), config.adam);
    TrainReport report;
    report.losses.reserve(config.steps);

    Tensor x0_batch = Tensor::zeros({B, dc.frames, dc.in_channels, dc.input_size, dc.input_size});
    Tensor cond_batch = Tensor::zeros({B, dc.frames});
    const std::size_t stride = x0_batch.numel() / B;

    for (std::size_t step = 0; step < config.steps; ++step) {
        for (std::size_t s = 0; s < B; ++s) {
            const auto pick = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(data.size()) - 1));
            std::copy_n(data[pick].x0.data(), stride, x0_batch.data() + s * stride);
            std::copy_n(data[pick].cond.data(), dc.frames, cond_batch.data() + s * dc.frames);
        }

        std::vector<std::size_t> t_steps(B);
        std::vector<std::uint8_t> null_mask(B, 0);
        Tensor noise = Tensor::zeros(x0_batch.shape());
        for (std::size_t s = 0; s < B; ++s) {
            t_steps[s] = static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(sched.T)));
            for (std::size_t i = s * stride; i < (s + 1) * stride; ++i) noise[i] = rng.normal();
            null_mask[s] = rng.bernoulli(config.guidance.conditioning_dropout_prob) ? 1 : 0;
        }

        const Tensor x_t = forward_sample_batch(x0_batch, t_steps, noise, sched);
        ag::Var diff = ag::sub(net.forward(x_t, t_steps, cond_batch, null_mask),
                               ag::constant(noise));
        ag::Var loss = config.loss == LossType::l1 ? ag::mean_all(ag::abs(diff))
                                                   : ag::mean_all(ag::square(diff));
        const double value = loss->value[0];
        if (!std::isfinite(value))
            throw DivergenceError("non-finite loss at step " + std::to_string(step));

        opt.zero_grad();
        ag::backward(loss);
        opt.step();
        report.losses.push_back(value);
        if (on_step) on_step(step, value);
    }
    return report;
}

}  // namespace metamat
