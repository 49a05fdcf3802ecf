#include "metamat/unet.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "metamat/errors.hpp"

namespace metamat {

namespace {

constexpr double kNormEps = 1e-5;

std::string join_multipliers(const std::vector<std::size_t>& m) {
    std::string out;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(m[i]);
    }
    return out;
}

std::vector<std::size_t> parse_multipliers(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw std::invalid_argument("config: empty channel multiplier");
        out.push_back(static_cast<std::size_t>(std::stoull(item)));
    }
    return out;
}

}  // namespace

std::size_t DenoiserConfig::bottom_size() const {
    std::size_t s = input_size;
    for (std::size_t l = 1; l < levels(); ++l) s /= 2;
    return s;
}

std::vector<std::size_t> DenoiserConfig::channels() const {
    std::vector<std::size_t> chs;
    chs.reserve(levels());
    for (std::size_t m : channel_multipliers) chs.push_back(base_channels * m);
    return chs;
}

void DenoiserConfig::validate() const {
    if (in_channels == 0) throw std::invalid_argument("config: in_channels must be positive");
    if (base_channels == 0 || base_channels % 2 != 0)
        throw std::invalid_argument("config: base_channels must be positive and even");
    if (channel_multipliers.empty())
        throw std::invalid_argument("config: channel_multipliers must be non-empty");
    for (std::size_t m : channel_multipliers)
        if (m == 0) throw std::invalid_argument("config: channel multipliers must be positive");
    if (attention_heads == 0 || head_dim == 0)
        throw std::invalid_argument("config: attention_heads and head_dim must be positive");
    if (frames == 0) throw std::invalid_argument("config: frames must be positive");
    if (token_dim == 0 || time_embed_dim == 0)
        throw std::invalid_argument("config: embedding dims must be positive");
    std::size_t need = 1;
    for (std::size_t l = 1; l < levels(); ++l) need *= 2;
    if (input_size == 0 || input_size % need != 0 || input_size / need == 0)
        throw std::invalid_argument("config: input_size must be divisible by 2^(levels-1)");
}

std::string DenoiserConfig::serialize() const {
    std::ostringstream os;
    os << "in_channels=" << in_channels << '\n'
       << "base_channels=" << base_channels << '\n'
       << "channel_multipliers=" << join_multipliers(channel_multipliers) << '\n'
       << "attention_heads=" << attention_heads << '\n'
       << "head_dim=" << head_dim << '\n'
       << "frames=" << frames << '\n'
       << "input_size=" << input_size << '\n'
       << "token_dim=" << token_dim << '\n'
       << "time_embed_dim=" << time_embed_dim << '\n'
       << "temporal_attention=" << (temporal_attention ? 1 : 0) << '\n'
       << "init_seed=" << init_seed << '\n';
    return os.str();
}

DenoiserConfig DenoiserConfig::deserialize(const std::string& text) {
    DenoiserConfig cfg;
    std::istringstream is(text);
    std::string line;
    bool any = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: malformed line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        any = true;
        if (key == "in_channels") cfg.in_channels = std::stoull(value);
        else if (key == "base_channels") cfg.base_channels = std::stoull(value);
        else if (key == "channel_multipliers") cfg.channel_multipliers = parse_multipliers(value);
        else if (key == "attention_heads") cfg.attention_heads = std::stoull(value);
        else if (key == "head_dim") cfg.head_dim = std::stoull(value);
        else if (key == "frames") cfg.frames = std::stoull(value);
        else if (key == "input_size") cfg.input_size = std::stoull(value);
        else if (key == "token_dim") cfg.token_dim = std::stoull(value);
        else if (key == "time_embed_dim") cfg.time_embed_dim = std::stoull(value);
        else if (key == "temporal_attention") cfg.temporal_attention = value != "0";
        else if (key == "init_seed") cfg.init_seed = std::stoull(value);
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    if (!any) throw std::invalid_argument("config: empty text");
    cfg.validate();
    return cfg;
}

ag::Var ParamRegistry::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    ag::Var v = ag::make_param(std::move(init));
    index_[name] = entries_.size();
    entries_.emplace_back(name, v);
    return v;
}

ag::Var ParamRegistry::find(const std::string& name) const {
    const auto it = index_.find(name);
    return it == index_.end() ? ag::Var{} : entries_[it->second].second;
}

std::vector<ag::Var> ParamRegistry::vars() const {
    std::vector<ag::Var> out;
    out.reserve(entries_.size());
    for (const auto& [name, v] : entries_) out.push_back(v);
    return out;
}

std::size_t ParamRegistry::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v->value.numel();
    return n;
}

namespace unet {

using ag::Var;

Tensor Init::normal(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
    return t;
}

Tensor Init::he(Shape shape, std::size_t fan_in) {
    return normal(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)));
}

Linear::Linear(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
               std::size_t out, bool zero_init) {
    Tensor wt = zero_init ? Tensor::zeros({in, out}) : init.he({in, out}, in);
    w = reg.add(name + ".weight", std::move(wt));
    b = reg.add(name + ".bias", Tensor::zeros({out}));
}

Var Linear::operator()(const Var& x) const { return ag::add(ag::matmul(x, w), b); }

Conv::Conv(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
           std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t pad_,
           bool zero_init)
    : stride(stride_), pad(pad_) {
    Tensor wt = zero_init ? Tensor::zeros({out, in, kernel, kernel})
                          : init.he({out, in, kernel, kernel}, in * kernel * kernel);
    w = reg.add(name + ".weight", std::move(wt));
    b = reg.add(name + ".bias", Tensor::zeros({out}));
}

Var Conv::operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }

std::size_t GroupNorm::group_count(std::size_t channels) {
    std::size_t g = std::min<std::size_t>(8, channels);
    while (channels % g != 0) --g;
    return g;
}

GroupNorm::GroupNorm(ParamRegistry& reg, Init& init, const std::string& name,
                     std::size_t channels)
    : groups(group_count(channels)) {
    (void)init;
    gamma = reg.add(name + ".gamma", Tensor::full({channels}, 1.0));
    beta = reg.add(name + ".beta", Tensor::zeros({channels}));
}

Var GroupNorm::operator()(const Var& x) const {
    using namespace ag;
    const Shape& s = x->value.shape();
    const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
    Var r = reshape(x, {n, groups, (c / groups) * h * w});
    Var centered = sub(r, mean_axes(r, {2}));
    Var var = mean_axes(square(centered), {2});
    Var norm = div(centered, sqrt(add_scalar(var, kNormEps)));
    Var out = reshape(norm, {n, c, h, w});
    out = mul(out, reshape(gamma, {1, c, 1, 1}));
    return add(out, reshape(beta, {1, c, 1, 1}));
}

ChannelNorm::ChannelNorm(ParamRegistry& reg, Init& init, const std::string& name,
                         std::size_t channels) {
    (void)init;
    gamma = reg.add(name + ".gamma", Tensor::full({channels}, 1.0));
    beta = reg.add(name + ".beta", Tensor::zeros({channels}));
}

Var ChannelNorm::operator()(const Var& x) const {
    using namespace ag;
    const std::size_t c = x->value.dim(2);
    Var centered = sub(x, mean_axes(x, {2}));
    Var var = mean_axes(square(centered), {2});
    Var norm = div(centered, sqrt(add_scalar(var, kNormEps)));
    norm = mul(norm, reshape(gamma, {1, 1, c}));
    return add(norm, reshape(beta, {1, 1, c}));
}

ResBlock::ResBlock(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
                   std::size_t out, std::size_t embed_dim)
    : norm1(reg, init, name + ".norm1", in),
      norm2(reg, init, name + ".norm2", out),
      has_skip(in != out) {
    conv1 = Conv(reg, init, name + ".conv1", in, out, 3, 1, 1);
    embed = Linear(reg, init, name + ".embed", embed_dim, out);
    conv2 = Conv(reg, init, name + ".conv2", out, out, 3, 1, 1, /*zero_init=*/true);
    if (has_skip) skip = Conv(reg, init, name + ".skip", in, out, 1, 1, 0);
}

Var ResBlock::operator()(const Var& x, const Var& latent) const {
    using namespace ag;
    const std::size_t n = x->value.dim(0);
    const std::size_t out_ch = conv1.w->value.dim(0);
    Var h = conv1(silu(norm1(x)));
    Var e = embed(silu(latent));
    h = add(h, reshape(e, {n, out_ch, 1, 1}));
    h = conv2(silu(norm2(h)));
    return add(h, has_skip ? skip(x) : x);
}

SpatialSelfAttention::SpatialSelfAttention(ParamRegistry& reg, Init& init,
                                           const std::string& name, std::size_t channels,
                                           std::size_t heads_, std::size_t head_dim_,
                                           bool softmax_form_)
    : norm(reg, init, name + ".norm", channels),
      heads(heads_),
      head_dim(head_dim_),
      softmax_form(softmax_form_) {
    const std::size_t inner = heads * head_dim;
    qkv = Conv(reg, init, name + ".qkv", channels, 3 * inner, 1, 1, 0);
    proj = Conv(reg, init, name + ".proj", inner, channels, 1, 1, 0, /*zero_init=*/true);
}

Var SpatialSelfAttention::operator()(const Var& x) const {
    using namespace ag;
    const Shape& s = x->value.shape();
    const std::size_t n = s[0], c = s[1], hh = s[2], ww = s[3];
    const std::size_t hw = hh * ww;
    const std::size_t inner = heads * head_dim;

    Var packed = reshape(qkv(norm(x)), {n, 3, heads, head_dim, hw});
    auto part = [&](std::size_t idx) {
        return reshape(slice(packed, 1, idx, 1), {n * heads, head_dim, hw});
    };
    Var q = part(0), k = part(1), v = part(2);
    Var vt = permute(v, {0, 2, 1});  // [nh, hw, d]

    Var out;
    if (softmax_form) {
        Var scores = bmm(permute(q, {0, 2, 1}), k);  // [nh, hw, hw]
        scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(head_dim)));
        out = bmm(softmax_last(scores), vt);  // [nh, hw, d]
    } else {
        Var qf = elu_plus_one(q);
        Var kf = elu_plus_one(k);
        Var qt = permute(qf, {0, 2, 1});      // [nh, hw, d]
        Var kv = bmm(kf, vt);                 // [nh, d, d]
        Var numer = bmm(qt, kv);              // [nh, hw, d]
        Var denom = bmm(qt, sum_axes(kf, {2}));  // [nh, hw, 1]
        out = div(numer, denom);
    }
    out = reshape(permute(out, {0, 2, 1}), {n, inner, hh, ww});
    return add(x, proj(out));
}

FrameCrossAttention::FrameCrossAttention(ParamRegistry& reg, Init& init,
                                         const std::string& name, std::size_t channels,
                                         std::size_t token_dim, std::size_t inner_dim) {
    value = Linear(reg, init, name + ".value", token_dim, inner_dim);
    proj = Linear(reg, init, name + ".proj", inner_dim, channels, /*zero_init=*/true);
}

Var FrameCrossAttention::operator()(const Var& x, const Var& token) const {
    using namespace ag;
    const std::size_t n = x->value.dim(0);
    const std::size_t c = x->value.dim(1);
    Var o = proj(value(token));  // [n, c]
    return add(x, reshape(o, {n, c, 1, 1}));
}

TemporalAttention::TemporalAttention(ParamRegistry& reg, Init& init, const std::string& name,
                                     std::size_t channels, std::size_t token_dim,
                                     std::size_t frames_, std::size_t heads_,
                                     std::size_t head_dim_)
    : norm(reg, init, name + ".norm", channels), heads(heads_), head_dim(head_dim_),
      frames(frames_) {
    const std::size_t inner = heads * head_dim;
    q = Linear(reg, init, name + ".q", channels, inner);
    k = Linear(reg, init, name + ".k", channels, inner);
    v = Linear(reg, init, name + ".v", channels, inner);
    token_k = Linear(reg, init, name + ".token_k", token_dim, inner);
    token_v = Linear(reg, init, name + ".token_v", token_dim, inner);
    relpos = reg.add(name + ".relpos", init.normal({heads, 2 * frames - 1}, 0.02));
    proj = Linear(reg, init, name + ".proj", inner, channels, /*zero_init=*/true);

    // Bias matrix layout: query frame i against key j, where keys 0..F-1 are
    // frames and keys F..2F-1 are the tokens of those frames. Both halves map
    // to the table entry for signed distance i - pos(j).
    relpos_layout = Tensor::zeros({2 * frames - 1, frames * 2 * frames});
    for (std::size_t i = 0; i < frames; ++i)
        for (std::size_t j = 0; j < 2 * frames; ++j) {
            const std::size_t pos = j < frames ? j : j - frames;
            const std::size_t rel = i + frames - 1 - pos;
            relpos_layout.at({rel, i * 2 * frames + j}) = 1.0;
        }
}

Var TemporalAttention::operator()(const Var& x, const Var& tokens) const {
    using namespace ag;
    const Shape& s = x->value.shape();
    const std::size_t B = s[0], F = s[1], C = s[2], H = s[3], W = s[4];
    const std::size_t td = tokens->value.dim(2);
    const std::size_t inner = heads * head_dim;
    const std::size_t nt = B * H * W;

    Var seq = reshape(permute(x, {0, 3, 4, 1, 2}), {nt, F, C});  // rows ordered (b,h,w)
    Var sf = reshape(norm(seq), {nt * F, C});
    Var Q = reshape(q(sf), {nt, F, inner});
    Var Kf = reshape(k(sf), {nt, F, inner});
    Var Vf = reshape(v(sf), {nt, F, inner});

    // Token keys/values are per sample; replicate across the pixel axis.
    Var tf = reshape(tokens, {B * F, td});
    Var ones_hw = constant(Tensor::full({1, H * W, 1, 1}, 1.0));
    Var Kt = reshape(mul(reshape(token_k(tf), {B, 1, F, inner}), ones_hw), {nt, F, inner});
    Var Vt = reshape(mul(reshape(token_v(tf), {B, 1, F, inner}), ones_hw), {nt, F, inner});

    auto split_heads = [&](const Var& m, std::size_t len) {
        return reshape(permute(reshape(m, {nt, len, heads, head_dim}), {0, 2, 1, 3}),
                       {nt * heads, len, head_dim});
    };
    Var Qh = split_heads(Q, F);
    Var Kh = split_heads(concat({Kf, Kt}, 1), 2 * F);
    Var Vh = split_heads(concat({Vf, Vt}, 1), 2 * F);

    Var scores = bmm(Qh, permute(Kh, {0, 2, 1}));  // [nt*h, F, 2F]
    scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(head_dim)));
    Var bias = reshape(matmul(relpos, constant(relpos_layout)), {heads, F, 2 * F});
    scores = reshape(add(reshape(scores, {nt, heads, F, 2 * F}), bias),
                     {nt * heads, F, 2 * F});

    Var out = bmm(softmax_last(scores), Vh);  // [nt*h, F, d]
    out = reshape(permute(reshape(out, {nt, heads, F, head_dim}), {0, 2, 1, 3}), {nt * F, inner});
    Var y = add(seq, reshape(proj(out), {nt, F, C}));
    return permute(reshape(y, {B, H, W, F, C}), {0, 3, 4, 1, 2});
}

FusedEmbed::FusedEmbed(ParamRegistry& reg, Init& init, const std::string& name,
                       std::size_t sin_dim_, std::size_t cond_dim, std::size_t out_dim)
    : sin_dim(sin_dim_) {
    time1 = Linear(reg, init, name + ".time1", sin_dim, out_dim);
    time2 = Linear(reg, init, name + ".time2", out_dim, out_dim);
    cond1 = Linear(reg, init, name + ".cond1", cond_dim, out_dim);
    cond2 = Linear(reg, init, name + ".cond2", out_dim, out_dim);
}

Tensor FusedEmbed::sinusoid(const std::vector<std::size_t>& t_steps) const {
    const std::size_t half = sin_dim / 2;
    Tensor out({t_steps.size(), sin_dim});
    for (std::size_t b = 0; b < t_steps.size(); ++b) {
        const double t = static_cast<double>(t_steps[b]);
        for (std::size_t i = 0; i < half; ++i) {
            const double denom = half > 1 ? static_cast<double>(half - 1) : 1.0;
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / denom);
            out.at({b, i}) = std::sin(t * freq);
            out.at({b, half + i}) = std::cos(t * freq);
        }
    }
    return out;
}

Var FusedEmbed::operator()(const std::vector<std::size_t>& t_steps,
                           const Var& cond_latent) const {
    using namespace ag;
    Var tl = time2(silu(time1(constant(sinusoid(t_steps)))));
    Var cl = cond2(silu(cond1(cond_latent)));
    return add(tl, cl);
}

LevelBlock::LevelBlock(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
                       std::size_t out, std::size_t embed_dim, std::size_t token_dim,
                       std::size_t heads, std::size_t head_dim, bool softmax_attention)
    : res1(reg, init, name + ".res1", in, out, embed_dim),
      res2(reg, init, name + ".res2", out, out, embed_dim),
      attn(reg, init, name + ".attn", out, heads, head_dim, softmax_attention),
      cross(reg, init, name + ".cross", out, token_dim, heads * head_dim) {}

Var LevelBlock::operator()(const Var& x, const Var& latent, const Var& tokens) const {
    Var h = res1(x, latent);
    h = res2(h, latent);
    h = attn(h);
    return cross(h, tokens);
}

}  // namespace unet

VideoUnet::VideoUnet(DenoiserConfig config) : config_(std::move(config)) {
    config_.validate();
    unet::Init init(config_.init_seed);
    const std::size_t L = config_.levels();
    const auto chs = config_.channels();
    const std::size_t heads = config_.attention_heads;
    const std::size_t hd = config_.head_dim;
    const std::size_t ted = config_.time_embed_dim;
    const std::size_t td = config_.token_dim;
    const std::size_t F = config_.frames;

    null_tokens_ = init.normal({F, td}, 1.0);
    token_embed_ = unet::Linear(reg_, init, "token_embed", 1, td);
    null_latent_ = reg_.add("null_latent", init.normal({td}, 0.02));
    fused_ = unet::FusedEmbed(reg_, init, "fuse", config_.base_channels, td, ted);
    stem_ = unet::Conv(reg_, init, "stem", config_.in_channels, chs[0], 3, 1, 1);
    if (config_.temporal_attention)
        temporal_in_ = unet::TemporalAttention(reg_, init, "temporal_in", chs[0], td, F, heads, hd);

    std::size_t prev = chs[0];
    for (std::size_t l = 0; l < L; ++l) {
        const std::string name = "down" + std::to_string(l);
        down_.push_back(unet::LevelBlock(reg_, init, name, prev, chs[l], ted, td, heads, hd,
                                         /*softmax_attention=*/false));
        if (config_.temporal_attention)
            down_temporal_.push_back(
                unet::TemporalAttention(reg_, init, name + ".temporal", chs[l], td, F, heads, hd));
        if (l + 1 < L)
            downsample_.push_back(unet::Conv(reg_, init, name + ".downsample", chs[l], chs[l], 3, 2, 1));
        prev = chs[l];
    }

    mid_res1_ = unet::ResBlock(reg_, init, "mid.res1", chs[L - 1], chs[L - 1], ted);
    mid_attn_ = unet::SpatialSelfAttention(reg_, init, "mid.attn", chs[L - 1], heads, hd,
                                           /*softmax_form=*/true);
    mid_cross_ = unet::FrameCrossAttention(reg_, init, "mid.cross", chs[L - 1], td, heads * hd);
    if (config_.temporal_attention)
        mid_temporal_ = unet::TemporalAttention(reg_, init, "mid.temporal", chs[L - 1], td, F, heads, hd);
    mid_res2_ = unet::ResBlock(reg_, init, "mid.res2", chs[L - 1], chs[L - 1], ted);

    up_.resize(L);
    if (config_.temporal_attention) up_temporal_.resize(L);
    upsample_.resize(L >= 1 ? L - 1 : 0);
    for (std::size_t i = 0; i < L; ++i) {
        const std::size_t l = L - 1 - i;
        const std::string name = "up" + std::to_string(l);
        if (l + 1 < L)
            upsample_[l] = unet::Conv(reg_, init, name + ".upsample", chs[l + 1], chs[l], 3, 1, 1);
        up_[l] = unet::LevelBlock(reg_, init, name, 2 * chs[l], chs[l], ted, td, heads, hd,
                                  /*softmax_attention=*/false);
        if (config_.temporal_attention)
            up_temporal_[l] =
                unet::TemporalAttention(reg_, init, name + ".temporal", chs[l], td, F, heads, hd);
    }

    head_norm_ = unet::GroupNorm(reg_, init, "head.norm", chs[0]);
    head_conv_ = unet::Conv(reg_, init, "head.conv", chs[0], config_.in_channels, 3, 1, 1,
                            /*zero_init=*/true);
}

ag::Var VideoUnet::conditioning_tokens(std::size_t batch, const Tensor& cond,
                                       const std::vector<std::uint8_t>& is_null) const {
    using namespace ag;
    const std::size_t F = config_.frames;
    const std::size_t td = config_.token_dim;
    std::vector<Var> rows;
    rows.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        if (is_null[b]) {
            rows.push_back(reshape(constant(null_tokens_), {1, F, td}));
        } else {
            Tensor r({F, 1});
            for (std::size_t f = 0; f < F; ++f) r.at({f, 0}) = cond.at({b, f});
            rows.push_back(reshape(token_embed_(constant(std::move(r))), {1, F, td}));
        }
    }
    return batch == 1 ? rows[0] : concat(rows, 0);
}

ag::Var VideoUnet::forward(const Tensor& x, const std::vector<std::size_t>& t_steps,
                           const Tensor& cond, const std::vector<std::uint8_t>& null_mask) {
    using namespace ag;
    const std::size_t F = config_.frames;
    if (x.rank() != 5)
        throw std::invalid_argument("denoiser input must be [batch, frames, channels, h, w]");
    const std::size_t B = x.dim(0);
    if (x.dim(1) != F || x.dim(2) != config_.in_channels || x.dim(3) != config_.input_size ||
        x.dim(4) != config_.input_size)
        throw std::invalid_argument("denoiser input shape does not match config");
    if (t_steps.size() != B) throw std::invalid_argument("one diffusion step per sample required");
    if (!null_mask.empty() && null_mask.size() != B)
        throw std::invalid_argument("null_mask size must equal batch size");

    std::vector<std::uint8_t> is_null(B, cond.numel() == 0 ? 1 : 0);
    for (std::size_t b = 0; b < null_mask.size(); ++b)
        if (null_mask[b]) is_null[b] = 1;
    bool any_cond = false;
    for (std::size_t b = 0; b < B; ++b) any_cond |= !is_null[b];
    if (any_cond && (cond.rank() != 2 || cond.dim(0) != B || cond.dim(1) != F))
        throw std::invalid_argument("cond must be [batch, frames]");

    const std::size_t L = config_.levels();
    const auto chs = config_.channels();
    const std::size_t ted = config_.time_embed_dim;
    const std::size_t td = config_.token_dim;

    Var tokens = conditioning_tokens(B, cond, is_null);  // [B, F, td]

    std::vector<Var> latents;
    latents.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
        if (is_null[b])
            latents.push_back(reshape(null_latent_, {1, td}));
        else
            latents.push_back(reshape(mean_axes(slice(tokens, 0, b, 1), {1}), {1, td}));
    }
    Var cond_latent = B == 1 ? latents[0] : concat(latents, 0);
    Var emb = fused_(t_steps, cond_latent);  // [B, ted]

    Var ones_f = constant(Tensor::full({1, F, 1}, 1.0));
    Var emb_bf = reshape(mul(reshape(emb, {B, 1, ted}), ones_f), {B * F, ted});
    Var tok_bf = reshape(tokens, {B * F, td});

    std::size_t hh = config_.input_size, ww = config_.input_size;
    auto temporal = [&](Var h, const unet::TemporalAttention& blk, std::size_t ch) {
        if (!config_.temporal_attention) return h;
        Var x5 = reshape(h, {B, F, ch, hh, ww});
        return reshape(blk(x5, tokens), {B * F, ch, hh, ww});
    };

    Var h = stem_(reshape(constant(x), {B * F, config_.in_channels, hh, ww}));
    h = temporal(h, temporal_in_, chs[0]);

    std::vector<Var> skips;
    skips.reserve(L);
    for (std::size_t l = 0; l < L; ++l) {
        h = down_[l](h, emb_bf, tok_bf);
        if (config_.temporal_attention) h = temporal(h, down_temporal_[l], chs[l]);
        skips.push_back(h);
        if (l + 1 < L) {
            h = downsample_[l](h);
            hh /= 2;
            ww /= 2;
        }
    }

    h = mid_res1_(h, emb_bf);
    h = mid_attn_(h);
    h = mid_cross_(h, tok_bf);
    if (config_.temporal_attention) h = temporal(h, mid_temporal_, chs[L - 1]);
    h = mid_res2_(h, emb_bf);

    for (std::size_t i = 0; i < L; ++i) {
        const std::size_t l = L - 1 - i;
        if (l + 1 < L) {
            h = upsample_[l](upsample_nearest_2x(h));
            hh *= 2;
            ww *= 2;
        }
        h = concat({h, skips[l]}, 1);
        h = up_[l](h, emb_bf, tok_bf);
        if (config_.temporal_attention) h = temporal(h, up_temporal_[l], chs[l]);
    }

    h = head_conv_(silu(head_norm_(h)));
    return reshape(h, {B, F, config_.in_channels, config_.input_size, config_.input_size});
}

Tensor VideoUnet::predict(const Tensor& x, const std::vector<std::size_t>& t_steps,
                          const Tensor& cond, const std::vector<std::uint8_t>& null_mask) {
    ag::NoGradGuard guard;
    return forward(x, t_steps, cond, null_mask)->value;
}

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'M', 'V', 'U', 'N', 'E', 'T', '1'};

void append_u32(std::string& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

void append_u64(std::string& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

std::uint32_t read_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw CorruptRecordError("checkpoint truncated");
    std::uint32_t v;
    std::memcpy(&v, in.data() + pos, 4);
    pos += 4;
    return v;
}

std::uint64_t read_u64(const std::string& in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw CorruptRecordError("checkpoint truncated");
    std::uint64_t v;
    std::memcpy(&v, in.data() + pos, 8);
    pos += 8;
    return v;
}

}  // namespace

void save_checkpoint(const VideoUnet& net, const std::string& path) {
    std::string payload;
    const std::string cfg = net.config().serialize();
    append_u64(payload, cfg.size());
    payload += cfg;
    const auto& entries = net.params().entries();
    append_u32(payload, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, var] : entries) {
        append_u32(payload, static_cast<std::uint32_t>(name.size()));
        payload += name;
        const Tensor& t = var->value;
        append_u32(payload, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d)
            append_u32(payload, static_cast<std::uint32_t>(t.dim(d)));
        payload.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
    }
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    std::string tail;
    append_u32(tail, crc);
    out.write(tail.data(), 4);
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

std::unique_ptr<VideoUnet> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() < sizeof(kCheckpointMagic) + 4 ||
        std::memcmp(blob.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw CorruptRecordError("not a checkpoint file: " + path);

    const std::string payload = blob.substr(8, blob.size() - 12);
    std::size_t tail_pos = blob.size() - 4;
    const std::uint32_t stored_crc = read_u32(blob, tail_pos);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));
    if (crc != stored_crc) throw CorruptRecordError("checkpoint crc mismatch: " + path);

    std::size_t pos = 0;
    const std::uint64_t cfg_len = read_u64(payload, pos);
    if (pos + cfg_len > payload.size()) throw CorruptRecordError("checkpoint truncated");
    const std::string cfg_text = payload.substr(pos, cfg_len);
    pos += cfg_len;
    auto net = std::make_unique<VideoUnet>(DenoiserConfig::deserialize(cfg_text));

    const std::uint32_t count = read_u32(payload, pos);
    if (count != net->params().entries().size())
        throw CorruptRecordError("checkpoint parameter count mismatch");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(payload, pos);
        if (pos + name_len > payload.size()) throw CorruptRecordError("checkpoint truncated");
        const std::string name = payload.substr(pos, name_len);
        pos += name_len;
        ag::Var var = net->params().find(name);
        if (!var) throw CorruptRecordError("checkpoint has unknown parameter: " + name);
        const std::uint32_t rank = read_u32(payload, pos);
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = read_u32(payload, pos);
        if (shape != var->value.shape())
            throw CorruptRecordError("checkpoint shape mismatch for " + name);
        const std::size_t bytes = var->value.numel() * sizeof(double);
        if (pos + bytes > payload.size()) throw CorruptRecordError("checkpoint truncated");
        std::memcpy(var->value.data(), payload.data() + pos, bytes);
        pos += bytes;
    }
    if (pos != payload.size()) throw CorruptRecordError("checkpoint has trailing bytes");
    return net;
}

}  // namespace metamat
