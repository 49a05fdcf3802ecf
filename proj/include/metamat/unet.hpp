#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "metamat/autodiff.hpp"
#include "metamat/diffusion.hpp"
#include "metamat/rng.hpp"
#include "metamat/tensor.hpp"

namespace metamat {

// Topology of the conditional video denoiser. `channel_multipliers` sets the
// width per resolution level; the spatial size halves between levels, so
// `input_size` must be divisible by 2^(levels-1).
struct DenoiserConfig {
    std::size_t in_channels = 3;
    std::size_t base_channels = 64;
    std::vector<std::size_t> channel_multipliers = {1, 2, 4, 8};
    std::size_t attention_heads = 8;
    std::size_t head_dim = 32;
    std::size_t frames = 11;
    std::size_t input_size = 96;
    std::size_t token_dim = 64;
    std::size_t time_embed_dim = 256;
    bool temporal_attention = true;
    std::uint64_t init_seed = 7;

    std::size_t levels() const { return channel_multipliers.size(); }
    std::size_t attention_dim() const { return attention_heads * head_dim; }
    std::size_t bottom_size() const;
    std::vector<std::size_t> channels() const;

    void validate() const;
    std::string serialize() const;
    static DenoiserConfig deserialize(const std::string& text);
    bool operator==(const DenoiserConfig&) const = default;
};

// Named trainable tensors in registration order. Registration order also fixes
// the init-RNG consumption order, so one config + seed always yields the same
// parameters, and checkpoints can be validated name by name.
class ParamRegistry {
public:
    ag::Var add(const std::string& name, Tensor init);
    ag::Var find(const std::string& name) const;  // null Var if absent

    const std::vector<std::pair<std::string, ag::Var>>& entries() const { return entries_; }
    std::vector<ag::Var> vars() const;
    std::size_t scalar_count() const;

private:
    std::vector<std::pair<std::string, ag::Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

namespace unet {

// Draws parameter initial values from a single stream; call order matters.
struct Init {
    explicit Init(std::uint64_t seed) : rng(seed) {}
    Tensor normal(Shape shape, double stddev);
    Tensor he(Shape shape, std::size_t fan_in);  // N(0, sqrt(2/fan_in))
    Rng rng;
};

// y = x W + b with W stored [in, out]; x must be 2-D [batch, in].
struct Linear {
    Linear() = default;
    Linear(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
           std::size_t out, bool zero_init = false);
    ag::Var operator()(const ag::Var& x) const;
    ag::Var w, b;
};

struct Conv {
    Conv() = default;
    Conv(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
         std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad,
         bool zero_init = false);
    ag::Var operator()(const ag::Var& x) const;
    ag::Var w, b;
    std::size_t stride = 1;
    std::size_t pad = 0;
};

// Group normalization over [N,C,H,W]; group count adapts to narrow widths.
struct GroupNorm {
    GroupNorm() = default;
    GroupNorm(ParamRegistry& reg, Init& init, const std::string& name, std::size_t channels);
    ag::Var operator()(const ag::Var& x) const;
    static std::size_t group_count(std::size_t channels);
    ag::Var gamma, beta;
    std::size_t groups = 1;
};

// Layer normalization over the trailing channel axis of [N,S,C] sequences.
struct ChannelNorm {
    ChannelNorm() = default;
    ChannelNorm(ParamRegistry& reg, Init& init, const std::string& name, std::size_t channels);
    ag::Var operator()(const ag::Var& x) const;
    ag::Var gamma, beta;
};

// Residual convolution block; the fused step/conditioning latent enters
// between the two convolutions as a per-channel shift.
struct ResBlock {
    ResBlock() = default;
    ResBlock(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
             std::size_t out, std::size_t embed_dim);
    // x [N,in,H,W], latent [N,embed_dim] -> [N,out,H,W]
    ag::Var operator()(const ag::Var& x, const ag::Var& latent) const;
    GroupNorm norm1, norm2;
    Conv conv1, conv2, skip;
    Linear embed;
    bool has_skip = false;
};

// Residual self-attention over pixels within one frame. The linear form uses
// the positive elu+1 feature map (cost linear in pixel count); the softmax
// form is exact attention for the coarsest grid. Output projection starts at
// zero so the block is the identity at init.
struct SpatialSelfAttention {
    SpatialSelfAttention() = default;
    SpatialSelfAttention(ParamRegistry& reg, Init& init, const std::string& name,
                         std::size_t channels, std::size_t heads, std::size_t head_dim,
                         bool softmax_form);
    ag::Var operator()(const ag::Var& x) const;
    GroupNorm norm;
    Conv qkv, proj;
    std::size_t heads = 1;
    std::size_t head_dim = 1;
    bool softmax_form = false;
};

// Cross-attention from pixels to the conditioning token of the same strain
// step. With a single key the softmax weight is identically one, so the
// block reduces exactly to a token-driven per-frame bias on the feature map.
struct FrameCrossAttention {
    FrameCrossAttention() = default;
    FrameCrossAttention(ParamRegistry& reg, Init& init, const std::string& name,
                        std::size_t channels, std::size_t token_dim, std::size_t inner_dim);
    // x [N,C,H,W], token [N,token_dim] -> [N,C,H,W]
    ag::Var operator()(const ag::Var& x, const ag::Var& token) const;
    Linear value, proj;
};

// Self-attention across strain steps at every pixel. Keys and values are the
// frame features concatenated with the conditioning tokens; both halves share
// a learned relative-position bias indexed by frame distance. Zeroing the
// bias table makes the block equivariant to frame permutations.
struct TemporalAttention {
    TemporalAttention() = default;
    TemporalAttention(ParamRegistry& reg, Init& init, const std::string& name,
                      std::size_t channels, std::size_t token_dim, std::size_t frames,
                      std::size_t heads, std::size_t head_dim);
    // x [B,F,C,H,W], tokens [B,F,token_dim] -> [B,F,C,H,W]
    ag::Var operator()(const ag::Var& x, const ag::Var& tokens) const;
    ChannelNorm norm;
    Linear q, k, v, token_k, token_v, proj;
    ag::Var relpos;        // [heads, 2F-1]
    Tensor relpos_layout;  // [2F-1, F*2F] one-hot map from table to bias matrix
    std::size_t heads = 1;
    std::size_t head_dim = 1;
    std::size_t frames = 1;
};

// Fused latent fed to every residual block: a sinusoidal embedding of the
// diffusion step passed through one MLP, plus the frame-mean conditioning
// vector passed through another. Zero conditioning input contributes exactly
// zero because the MLP biases start at zero and silu(0) = 0.
struct FusedEmbed {
    FusedEmbed() = default;
    FusedEmbed(ParamRegistry& reg, Init& init, const std::string& name, std::size_t sin_dim,
               std::size_t cond_dim, std::size_t out_dim);
    Tensor sinusoid(const std::vector<std::size_t>& t_steps) const;  // [B, sin_dim]
    // cond_latent [B, cond_dim] -> [B, out_dim]
    ag::Var operator()(const std::vector<std::size_t>& t_steps, const ag::Var& cond_latent) const;
    Linear time1, time2, cond1, cond2;
    std::size_t sin_dim = 0;
};

// One resolution level: two residual blocks, pixel self-attention, then
// per-step token cross-attention.
struct LevelBlock {
    LevelBlock() = default;
    LevelBlock(ParamRegistry& reg, Init& init, const std::string& name, std::size_t in,
               std::size_t out, std::size_t embed_dim, std::size_t token_dim,
               std::size_t heads, std::size_t head_dim, bool softmax_attention);
    // x [N,in,H,W], latent [N,embed_dim], tokens [N,token_dim]
    ag::Var operator()(const ag::Var& x, const ag::Var& latent, const ag::Var& tokens) const;
    ResBlock res1, res2;
    SpatialSelfAttention attn;
    FrameCrossAttention cross;
};

}  // namespace unet

// Video U-Net noise predictor over [B,F,C,H,W] stacks. Spatial blocks treat
// frames as extra batch entries; temporal attention blocks (one after the
// stem, one after every spatial attention) exchange information across
// frames. Unconditional samples use a frozen random token array plus a
// learned null latent on the embedding path.
class VideoUnet final : public Denoiser {
public:
    explicit VideoUnet(DenoiserConfig config);

    const DenoiserConfig& config() const { return config_; }
    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    const Tensor& null_tokens() const { return null_tokens_; }

    // Builds the autodiff graph (honors the ambient grad mode). cond is
    // [B,frames] effective-stress values; an empty cond tensor or a set
    // null_mask entry selects the null conditioning for that sample.
    ag::Var forward(const Tensor& x, const std::vector<std::size_t>& t_steps, const Tensor& cond,
                    const std::vector<std::uint8_t>& null_mask);

    Tensor predict(const Tensor& x, const std::vector<std::size_t>& t_steps, const Tensor& cond,
                   const std::vector<std::uint8_t>& null_mask) override;

private:
    ag::Var conditioning_tokens(std::size_t batch, const Tensor& cond,
                                const std::vector<std::uint8_t>& is_null) const;

    DenoiserConfig config_;
    ParamRegistry reg_;
    Tensor null_tokens_;  // [frames, token_dim], frozen at init
    ag::Var null_latent_;
    unet::Linear token_embed_;
    unet::FusedEmbed fused_;
    unet::Conv stem_;
    unet::TemporalAttention temporal_in_;
    std::vector<unet::LevelBlock> down_;
    std::vector<unet::TemporalAttention> down_temporal_;
    std::vector<unet::Conv> downsample_;
    unet::ResBlock mid_res1_, mid_res2_;
    unet::SpatialSelfAttention mid_attn_;
    unet::FrameCrossAttention mid_cross_;
    unet::TemporalAttention mid_temporal_;
    std::vector<unet::LevelBlock> up_;
    std::vector<unet::TemporalAttention> up_temporal_;
    std::vector<unet::Conv> upsample_;
    unet::GroupNorm head_norm_;
    unet::Conv head_conv_;
};

// Checkpoint = serialized config + flat map of named parameter tensors,
// crc-checked. Loading rebuilds the net from the stored config (frozen
// buffers are re-derived from init_seed) and then overwrites every parameter.
void save_checkpoint(const VideoUnet& net, const std::string& path);
std::unique_ptr<VideoUnet> load_checkpoint(const std::string& path);

}  // namespace metamat
