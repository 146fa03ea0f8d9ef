#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/layers.hpp"

namespace recticast {

enum class Anchor { none, backbone_cond, side_cond };

std::string to_string(Anchor a);
Anchor anchor_from_string(const std::string& s);

struct STUNetConfig {
    std::size_t frames = 5;                       ///< frames per segment (m)
    std::size_t base_channels = 8;
    std::vector<std::size_t> channel_mults{1, 2, 2};
    std::size_t blocks_per_scale = 1;
    std::vector<std::size_t> side_scales{1, 2};   ///< scales receiving side-encoder FiLM
    std::size_t time_dim = 64;                    ///< sinusoidal timestep features
    std::size_t embed_dim = 32;                   ///< width of the projected condition embedding
    std::size_t segment_vocab = 0;                ///< 0 disables the segment-index condition
    std::size_t temporal_reduction = 4;           ///< bottleneck ratio of the temporal block
    /// With an anchor the net predicts data as anchor + net and returns the implied
    /// velocity (x - z) / max(1 - t, min_remaining_time); without one the net is the velocity.
    Anchor anchor = Anchor::backbone_cond;
    double min_remaining_time = 0.05;

    std::size_t num_scales() const { return channel_mults.size(); }
    std::size_t channels(std::size_t scale) const { return base_channels * channel_mults.at(scale); }

    friend bool operator==(const STUNetConfig&, const STUNetConfig&) = default;
};

void to_json(nlohmann::json& j, const STUNetConfig& c);
void from_json(const nlohmann::json& j, STUNetConfig& c);

/// Throws ConfigError unless every side scale lies in the deeper half
/// (index >= num_scales / 2, integer division) and sizes are consistent.
void validate(const STUNetConfig& config);

/// Inference-time conditions for one segment.
template <typename T>
struct ConditionBundle {
    BasicTensor<T> backbone_cond;  ///< [m,1,H,W], concatenated with z_t
    BasicTensor<T> side_cond;      ///< [m,1,H,W], consumed by the side encoder
    std::optional<std::size_t> segment_index;
};

/// Per-frame conv -> (+embedding) -> norm -> act -> conv with a residual path.
/// The second conv starts at zero so a fresh block is the identity (or its
/// 1x1 projection when channel counts differ).
template <typename T>
struct SpatialResBlock {
    Conv2dLayer<T> conv1;
    LinearLayer<T> embed;
    GroupNormLayer<T> norm;
    Conv2dLayer<T> conv2;
    std::optional<Conv2dLayer<T>> project;
    bool has_embed = false;

    SpatialResBlock() = default;
    SpatialResBlock(ParamStore<T>& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
                    std::size_t embed_dim, Rng& rng);
    /// x [B*m,C,h,w]; emb [B,E] (undefined Var when the block has no embedding input).
    ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& emb) const;
};

/// Mixes frames by folding time into channels: [B*m,C,h,w] -> [B,m*C,h,w],
/// point-wise bottleneck, channel attention, point-wise expansion
/// (zero-initialized), residual add, unfold.
template <typename T>
struct TemporalAttentionBlock {
    std::size_t frames = 1;
    Conv2dLayer<T> reduce;
    ChannelAttention<T> attention;
    Conv2dLayer<T> expand;

    TemporalAttentionBlock() = default;
    TemporalAttentionBlock(ParamStore<T>& store, const std::string& name, std::size_t frames, std::size_t channels,
                           std::size_t reduction, Rng& rng);
    ag::Var<T> operator()(const ag::Var<T>& x) const;
};

template <typename T>
class STUNet {
public:
    STUNet(const STUNetConfig& config, std::uint64_t seed);

    const STUNetConfig& config() const noexcept { return config_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }

    /// Batched velocity prediction. z, backbone_cond and side_cond are
    /// [B*m,1,H,W]; t has B entries; segment_index has B entries when the
    /// config uses a segment vocabulary and must be empty otherwise.
    ag::Var<T> forward(const ag::Var<T>& z, const ag::Var<T>& backbone_cond, const ag::Var<T>& side_cond,
                       std::span<const T> t, std::span<const std::size_t> segment_index, std::size_t batch) const;

    /// Single-segment inference velocity (no graph recording).
    BasicTensor<T> velocity(const BasicTensor<T>& z, const ConditionBundle<T>& cond, T t) const;

private:
    struct Stage {
        std::optional<Conv2dLayer<T>> down;
        std::vector<SpatialResBlock<T>> blocks;
        TemporalAttentionBlock<T> temporal;
    };
    struct DecoderStage {
        std::vector<SpatialResBlock<T>> blocks;
        TemporalAttentionBlock<T> temporal;
        std::optional<Conv2dLayer<T>> up;
    };
    struct FilmHead {
        Conv2dLayer<T> scale;
        Conv2dLayer<T> shift;
    };
    struct SideStage {
        std::optional<Conv2dLayer<T>> down;
        std::vector<SpatialResBlock<T>> blocks;
        std::optional<TemporalAttentionBlock<T>> temporal;
    };

    bool injects(std::size_t scale) const;
    ag::Var<T> embed(std::span<const T> t, std::span<const std::size_t> segment_index) const;

    STUNetConfig config_;
    ParamStore<T> params_;
    LinearLayer<T> time_in_;
    LinearLayer<T> time_out_;
    ag::Var<T> segment_table_;
    Conv2dLayer<T> in_conv_;
    std::vector<Stage> encoder_;
    SpatialResBlock<T> middle_;
    TemporalAttentionBlock<T> middle_temporal_;
    std::vector<DecoderStage> decoder_;  ///< indexed by scale
    GroupNormLayer<T> out_norm_;
    Conv2dLayer<T> out_conv_;

    Conv2dLayer<T> side_in_;
    std::vector<SideStage> side_;
    std::vector<std::optional<FilmHead>> enc_film_;
    std::vector<std::optional<FilmHead>> dec_film_;
};

}  // namespace recticast
