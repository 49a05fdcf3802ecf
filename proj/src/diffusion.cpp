#include "metamat/diffusion.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

#include "metamat/errors.hpp"

namespace metamat {

namespace {

void finalize(DiffusionSchedule& s) {
    const std::size_t T = s.T;
    s.alphas.assign(T + 1, 1.0);
    s.alpha_bars.assign(T + 1, 1.0);
    s.posterior_variances.assign(T + 1, 0.0);
    for (std::size_t t = 1; t <= T; ++t) {
        s.alphas[t] = 1.0 - s.betas[t];
        s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
        s.posterior_variances[t] =
            s.betas[t] * (1.0 - s.alpha_bars[t - 1]) / (1.0 - s.alpha_bars[t]);
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

DiffusionSchedule DiffusionSchedule::cosine(std::size_t T) {
    if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
    DiffusionSchedule s;
    s.family = ScheduleFamily::cosine;
    s.T = T;
    s.betas.assign(T + 1, 0.0);
    const double offset = 0.008;
    auto f = [&](double t) {
        const double arg = (t / static_cast<double>(T) + offset) / (1.0 + offset) * M_PI / 2.0;
        const double c = std::cos(arg);
        return c * c;
    };
    for (std::size_t t = 1; t <= T; ++t) {
        const double ratio = f(static_cast<double>(t)) / f(static_cast<double>(t - 1));
        s.betas[t] = std::min(1.0 - ratio, 0.999);
    }
    finalize(s);
    return s;
}

DiffusionSchedule DiffusionSchedule::linear(std::size_t T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
    DiffusionSchedule s;
    s.family = ScheduleFamily::linear;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.assign(T + 1, 0.0);
    for (std::size_t t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    }
    finalize(s);
    return s;
}

void DiffusionSchedule::validate() const {
    if (T < 1 || betas.size() != T + 1 || alpha_bars.size() != T + 1)
        throw std::invalid_argument("schedule arrays inconsistent with T");
    for (std::size_t t = 1; t <= T; ++t) {
        if (!(betas[t] > 0.0 && betas[t] < 1.0))
            throw std::invalid_argument("beta out of (0,1) at t=" + std::to_string(t));
        if (!(alpha_bars[t] < alpha_bars[t - 1]))
            throw std::invalid_argument("alpha_bar not strictly decreasing at t=" + std::to_string(t));
    }
}

std::string DiffusionSchedule::serialize() const {
    std::ostringstream out;
    out << "family=" << (family == ScheduleFamily::cosine ? "cosine" : "linear") << "\n";
    out << "steps=" << T << "\n";
    if (family == ScheduleFamily::linear) {
        out << "beta_start=" << format_double(beta_start) << "\n";
        out << "beta_end=" << format_double(beta_end) << "\n";
    }
    return out.str();
}

DiffusionSchedule DiffusionSchedule::deserialize(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("bad schedule line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const std::string fam = kv.at("family");
    const std::size_t T = std::stoull(kv.at("steps"));
    if (fam == "cosine") return cosine(T);
    if (fam == "linear")
        return linear(T, std::stod(kv.at("beta_start")), std::stod(kv.at("beta_end")));
    throw std::invalid_argument("unknown schedule family: " + fam);
}

void GuidanceConfig::validate() const {
    if (!(weight >= 0.0)) throw std::invalid_argument("guidance weight must be >= 0");
    if (!(conditioning_dropout_prob >= 0.0 && conditioning_dropout_prob <= 1.0))
        throw std::invalid_argument("conditioning dropout must lie in [0,1]");
}

Tensor forward_sample(const Tensor& x0, std::size_t t, const Tensor& noise,
                      const DiffusionSchedule& sched) {
    check_same_shape(x0, noise, "forward_sample");
    if (t < 1 || t > sched.T) throw std::invalid_argument("t outside [1, T]");
    const double a = std::sqrt(sched.alpha_bars[t]);
    const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
    Tensor out = x0;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * noise[i];
    return out;
}

Tensor forward_sample_batch(const Tensor& x0, const std::vector<std::size_t>& t_steps,
                            const Tensor& noise, const DiffusionSchedule& sched) {
    check_same_shape(x0, noise, "forward_sample_batch");
    const std::size_t B = x0.dim(0);
    if (t_steps.size() != B) throw std::invalid_argument("one t per batch sample required");
    const std::size_t stride = x0.numel() / B;
    Tensor out = x0;
    for (std::size_t s = 0; s < B; ++s) {
        const std::size_t t = t_steps[s];
        if (t < 1 || t > sched.T) throw std::invalid_argument("t outside [1, T]");
        const double a = std::sqrt(sched.alpha_bars[t]);
        const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
        for (std::size_t i = s * stride; i < (s + 1) * stride; ++i)
            out[i] = a * x0[i] + b * noise[i];
    }
    return out;
}

Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    check_same_shape(eps_cond, eps_uncond, "guided_noise");
    Tensor out = eps_cond;
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = eps_cond[i] + w * (eps_cond[i] - eps_uncond[i]);
    return out;
}

Tensor reverse_mean(const SampleState& state, const Tensor& eps_hat,
                    const DiffusionSchedule& sched) {
    check_same_shape(state.x, eps_hat, "reverse_mean");
    const std::size_t t = state.t;
    if (t < 1 || t > sched.T) throw std::invalid_argument("reverse step needs t in [1, T]");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alphas[t]);
    const double coef = sched.betas[t] / std::sqrt(1.0 - sched.alpha_bars[t]);
    Tensor mu = state.x;
    for (std::size_t i = 0; i < mu.numel(); ++i)
        mu[i] = inv_sqrt_alpha * (state.x[i] - coef * eps_hat[i]);
    return mu;
}

SampleState reverse_step(const SampleState& state, const Tensor& eps_hat,
                         const DiffusionSchedule& sched, Rng& rng) {
    Tensor mu = reverse_mean(state, eps_hat, sched);
    if (state.t > 1) {
        const double sd = std::sqrt(sched.posterior_variances[state.t]);
        for (std::size_t i = 0; i < mu.numel(); ++i) mu[i] += sd * rng.normal();
    }
    return {std::move(mu), state.t - 1};
}

double training_loss(const Tensor& x0_batch, const Tensor& cond_batch, Denoiser& denoiser,
                     const DiffusionSchedule& sched, const GuidanceConfig& guidance, Rng& rng,
                     LossType loss_type) {
    guidance.validate();
    const std::size_t B = x0_batch.dim(0);
    const std::size_t stride = x0_batch.numel() / B;

    std::vector<std::size_t> t_steps(B);
    std::vector<std::uint8_t> null_mask(B, 0);
    Tensor noise = Tensor::zeros(x0_batch.shape());
    for (std::size_t s = 0; s < B; ++s) {
        t_steps[s] = static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(sched.T)));
        for (std::size_t i = s * stride; i < (s + 1) * stride; ++i) noise[i] = rng.normal();
        null_mask[s] = rng.bernoulli(guidance.conditioning_dropout_prob) ? 1 : 0;
    }

    const Tensor x_t = forward_sample_batch(x0_batch, t_steps, noise, sched);
    const Tensor eps_hat = denoiser.predict(x_t, t_steps, cond_batch, null_mask);
    check_same_shape(eps_hat, noise, "training_loss");

    double loss = 0.0;
    for (std::size_t i = 0; i < noise.numel(); ++i) {
        const double d = noise[i] - eps_hat[i];
        loss += loss_type == LossType::l1 ? std::abs(d) : d * d;
    }
    loss /= static_cast<double>(noise.numel());
    if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");
    return loss;
}

Tensor sample(Denoiser& denoiser, const Tensor& cond, const DiffusionSchedule& sched,
              const GuidanceConfig& guidance, Rng& rng, const Shape& shape) {
    guidance.validate();
    const std::size_t B = shape.empty() ? 0 : shape[0];
    if (B == 0) throw std::invalid_argument("sample needs a batched shape");

    SampleState state{rng.normal_tensor(shape), sched.T};
    const std::vector<std::uint8_t> cond_mask(B, 0), null_mask(B, 1);
    for (std::size_t t = sched.T; t >= 1; --t) {
        std::vector<std::size_t> t_steps(B, t);
        Tensor eps = denoiser.predict(state.x, t_steps, cond, cond_mask);
        if (guidance.weight > 0.0) {
            const Tensor eps_uncond = denoiser.predict(state.x, t_steps, cond, null_mask);
            eps = guided_noise(eps, eps_uncond, guidance.weight);
        }
        state = reverse_step(state, eps, sched, rng);
        if (!state.x.all_finite())
            throw DivergenceError("non-finite sample state", static_cast<int>(t));
    }
    return std::move(state.x);
}

}  // namespace metamat
