#include "recticast/stunet.hpp"

#include <algorithm>

#include "recticast/flow.hpp"

namespace recticast {

std::string to_string(Anchor a) {
    switch (a) {
        case Anchor::none: return "none";
        case Anchor::backbone_cond: return "backbone_cond";
        case Anchor::side_cond: return "side_cond";
    }
    return "?";
}

Anchor anchor_from_string(const std::string& s) {
    if (s == "none") return Anchor::none;
    if (s == "backbone_cond") return Anchor::backbone_cond;
    if (s == "side_cond") return Anchor::side_cond;
    throw ConfigError("stunet: unknown anchor '" + s + "' (expected none, backbone_cond or side_cond)");
}

void to_json(nlohmann::json& j, const STUNetConfig& c) {
    j = nlohmann::json{{"frames", c.frames},
                       {"base_channels", c.base_channels},
                       {"channel_mults", c.channel_mults},
                       {"blocks_per_scale", c.blocks_per_scale},
                       {"side_scales", c.side_scales},
                       {"time_dim", c.time_dim},
                       {"embed_dim", c.embed_dim},
                       {"segment_vocab", c.segment_vocab},
                       {"temporal_reduction", c.temporal_reduction},
                       {"anchor", to_string(c.anchor)},
                       {"min_remaining_time", c.min_remaining_time}};
}

void from_json(const nlohmann::json& j, STUNetConfig& c) {
    static const char* known[] = {"frames",      "base_channels", "channel_mults", "blocks_per_scale",
                                  "side_scales", "time_dim",      "embed_dim",     "segment_vocab",
                                  "temporal_reduction", "anchor", "min_remaining_time"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw ConfigError("unknown stunet key '" + key + "'");
        }
    }
    STUNetConfig d;
    c.frames = j.value("frames", d.frames);
    c.base_channels = j.value("base_channels", d.base_channels);
    c.channel_mults = j.value("channel_mults", d.channel_mults);
    c.blocks_per_scale = j.value("blocks_per_scale", d.blocks_per_scale);
    c.side_scales = j.value("side_scales", d.side_scales);
    c.time_dim = j.value("time_dim", d.time_dim);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.segment_vocab = j.value("segment_vocab", d.segment_vocab);
    c.temporal_reduction = j.value("temporal_reduction", d.temporal_reduction);
    c.anchor = j.contains("anchor") ? anchor_from_string(j.at("anchor").get<std::string>()) : d.anchor;
    c.min_remaining_time = j.value("min_remaining_time", d.min_remaining_time);
}

void validate(const STUNetConfig& c) {
    if (c.frames == 0 || c.base_channels == 0 || c.channel_mults.empty() || c.blocks_per_scale == 0) {
        throw ConfigError("stunet: frames, base_channels, channel_mults and blocks_per_scale must be non-empty");
    }
    const std::size_t scales = c.num_scales();
    for (std::size_t s : c.side_scales) {
        if (s >= scales || s < scales / 2) {
            throw ConfigError("stunet: side scale " + std::to_string(s) + " outside the deeper half [" +
                              std::to_string(scales / 2) + "," + std::to_string(scales) + ")");
        }
    }
    for (std::size_t s = 0; s < scales; ++s) {
        const std::size_t folded = c.frames * c.channels(s);
        if (c.temporal_reduction == 0 || folded % c.temporal_reduction != 0) {
            throw ConfigError("stunet: temporal reduction " + std::to_string(c.temporal_reduction) +
                              " must divide frames*channels = " + std::to_string(folded));
        }
    }
    if (!(c.min_remaining_time > 0 && c.min_remaining_time <= 1)) {
        throw ConfigError("stunet: min_remaining_time must lie in (0,1]");
    }
    if (c.time_dim < 2 || c.time_dim % 2 != 0 || c.embed_dim == 0) {
        throw ConfigError("stunet: time_dim must be even and embed_dim positive");
    }
}

template <typename T>
SpatialResBlock<T>::SpatialResBlock(ParamStore<T>& store, const std::string& name, std::size_t in_ch,
                                    std::size_t out_ch, std::size_t embed_dim, Rng& rng)
    : conv1(store, name + ".conv1", in_ch, out_ch, 3, 1, rng),
      norm(store, name + ".norm", out_ch),
      conv2(store, name + ".conv2", out_ch, out_ch, 3, 1, rng, /*zero_init=*/true),
      has_embed(embed_dim > 0) {
    if (has_embed) {
        embed = LinearLayer<T>(store, name + ".embed", embed_dim, out_ch, rng);
    }
    if (in_ch != out_ch) {
        project.emplace(store, name + ".project", in_ch, out_ch, 1, 1, rng);
    }
}

template <typename T>
ag::Var<T> SpatialResBlock<T>::operator()(const ag::Var<T>& x, const ag::Var<T>& emb) const {
    ag::Var<T> h = conv1(x);
    if (has_embed && emb.defined()) {
        h = ag::add_group_bias(h, embed(ag::silu(emb)));
    }
    h = conv2(ag::silu(norm(h)));
    return ag::add(project ? (*project)(x) : x, h);
}

namespace {

std::size_t attention_reduction(std::size_t channels) {
    for (std::size_t r : {4, 2}) {
        if (channels % r == 0 && channels / r >= 2) return r;
    }
    return 1;
}

}  // namespace

template <typename T>
TemporalAttentionBlock<T>::TemporalAttentionBlock(ParamStore<T>& store, const std::string& name, std::size_t frames_,
                                                  std::size_t channels, std::size_t reduction, Rng& rng)
    : frames(frames_) {
    const std::size_t folded = frames * channels;
    if (reduction == 0 || folded % reduction != 0) {
        throw DimensionError("temporal block: reduction " + std::to_string(reduction) + " must divide " +
                             std::to_string(folded));
    }
    const std::size_t inner = folded / reduction;
    reduce = Conv2dLayer<T>(store, name + ".reduce", folded, inner, 1, 1, rng);
    attention = ChannelAttention<T>(store, name + ".attention", inner, attention_reduction(inner), rng);
    expand = Conv2dLayer<T>(store, name + ".expand", inner, folded, 1, 1, rng, /*zero_init=*/true);
}

template <typename T>
ag::Var<T> TemporalAttentionBlock<T>::operator()(const ag::Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[0] % frames != 0) {
        throw DimensionError("temporal block: leading axis of " + shape_to_string(s) + " not a multiple of " +
                             std::to_string(frames) + " frames");
    }
    const std::size_t batch = s[0] / frames;
    auto folded = ag::reshape(x, {batch, frames * s[1], s[2], s[3]});
    auto h = expand(attention(ag::silu(reduce(folded))));
    return ag::reshape(ag::add(folded, h), s);
}

template <typename T>
STUNet<T>::STUNet(const STUNetConfig& config, std::uint64_t seed) : config_(config) {
    validate(config_);
    Rng rng(seed);
    const std::size_t scales = config_.num_scales();
    const std::size_t m = config_.frames;
    const std::size_t e = config_.embed_dim;

    time_in_ = LinearLayer<T>(params_, "time.in", config_.time_dim, e, rng);
    time_out_ = LinearLayer<T>(params_, "time.out", e, e, rng);
    if (config_.segment_vocab > 0) {
        segment_table_ = params_.add("segment.table", fan_in_uniform<T>(Shape{config_.segment_vocab, e}, 1, rng));
    }

    in_conv_ = Conv2dLayer<T>(params_, "in", 2, config_.channels(0), 3, 1, rng);
    for (std::size_t s = 0; s < scales; ++s) {
        const std::string n = "enc" + std::to_string(s);
        Stage st;
        if (s > 0) st.down.emplace(params_, n + ".down", config_.channels(s - 1), config_.channels(s), 3, 2, rng);
        for (std::size_t b = 0; b < config_.blocks_per_scale; ++b) {
            st.blocks.emplace_back(params_, n + ".block" + std::to_string(b), config_.channels(s), config_.channels(s),
                                   e, rng);
        }
        st.temporal = TemporalAttentionBlock<T>(params_, n + ".temporal", m, config_.channels(s),
                                                config_.temporal_reduction, rng);
        encoder_.push_back(std::move(st));
    }
    const std::size_t deep = config_.channels(scales - 1);
    middle_ = SpatialResBlock<T>(params_, "mid.block", deep, deep, e, rng);
    middle_temporal_ = TemporalAttentionBlock<T>(params_, "mid.temporal", m, deep, config_.temporal_reduction, rng);

    decoder_.resize(scales);
    for (std::size_t s = scales; s-- > 0;) {
        const std::string n = "dec" + std::to_string(s);
        DecoderStage& st = decoder_[s];
        for (std::size_t b = 0; b < config_.blocks_per_scale; ++b) {
            const std::size_t in = b == 0 ? 2 * config_.channels(s) : config_.channels(s);
            st.blocks.emplace_back(params_, n + ".block" + std::to_string(b), in, config_.channels(s), e, rng);
        }
        st.temporal = TemporalAttentionBlock<T>(params_, n + ".temporal", m, config_.channels(s),
                                                config_.temporal_reduction, rng);
        if (s > 0) st.up.emplace(params_, n + ".up", config_.channels(s), config_.channels(s - 1), 3, 1, rng);
    }
    out_norm_ = GroupNormLayer<T>(params_, "out.norm", config_.channels(0));
    out_conv_ = Conv2dLayer<T>(params_, "out.conv", config_.channels(0), 1, 3, 1, rng, /*zero_init=*/true);

    // Side encoder: same stage layout as the U-Net encoder, run only as deep
    // as the deepest injection scale.
    enc_film_.resize(scales);
    dec_film_.resize(scales);
    if (!config_.side_scales.empty()) {
        const std::size_t deepest = *std::max_element(config_.side_scales.begin(), config_.side_scales.end());
        side_in_ = Conv2dLayer<T>(params_, "side.in", 1, config_.channels(0), 3, 1, rng);
        for (std::size_t s = 0; s <= deepest; ++s) {
            const std::string n = "side.enc" + std::to_string(s);
            SideStage st;
            if (s > 0) {
                st.down.emplace(params_, n + ".down", config_.channels(s - 1), config_.channels(s), 3, 2, rng);
                for (std::size_t b = 0; b < config_.blocks_per_scale; ++b) {
                    st.blocks.emplace_back(params_, n + ".block" + std::to_string(b), config_.channels(s),
                                           config_.channels(s), 0, rng);
                }
                st.temporal.emplace(params_, n + ".temporal", m, config_.channels(s), config_.temporal_reduction, rng);
            }
            side_.push_back(std::move(st));
        }
        for (std::size_t s : config_.side_scales) {
            const std::size_t c = config_.channels(s);
            const std::string n = "film" + std::to_string(s);
            enc_film_[s] = FilmHead{Conv2dLayer<T>(params_, n + ".enc.scale", c, c, 1, 1, rng, true),
                                    Conv2dLayer<T>(params_, n + ".enc.shift", c, c, 1, 1, rng, true)};
            dec_film_[s] = FilmHead{Conv2dLayer<T>(params_, n + ".dec.scale", c, 2 * c, 1, 1, rng, true),
                                    Conv2dLayer<T>(params_, n + ".dec.shift", c, 2 * c, 1, 1, rng, true)};
        }
    }
}

template <typename T>
bool STUNet<T>::injects(std::size_t scale) const {
    return std::find(config_.side_scales.begin(), config_.side_scales.end(), scale) != config_.side_scales.end();
}

template <typename T>
ag::Var<T> STUNet<T>::embed(std::span<const T> t, std::span<const std::size_t> segment_index) const {
    auto emb = time_out_(ag::silu(time_in_(ag::constant(flow::timestep_embedding<T>(t, config_.time_dim)))));
    if (config_.segment_vocab > 0) {
        if (segment_index.size() != t.size()) {
            throw ConfigError("stunet: segment index required for every batch element (vocabulary " +
                              std::to_string(config_.segment_vocab) + ")");
        }
        emb = ag::add(emb, ag::embedding(segment_table_, segment_index));
    } else if (!segment_index.empty()) {
        throw ConfigError("stunet: segment index given but the network has no segment vocabulary");
    }
    return emb;
}

template <typename T>
ag::Var<T> STUNet<T>::forward(const ag::Var<T>& z, const ag::Var<T>& backbone_cond, const ag::Var<T>& side_cond,
                              std::span<const T> t, std::span<const std::size_t> segment_index,
                              std::size_t batch) const {
    const auto& s = z.shape();
    const std::size_t scales = config_.num_scales();
    const std::size_t factor = std::size_t{1} << (scales - 1);
    if (s.size() != 4 || batch == 0 || s[0] != batch * config_.frames || s[1] != 1 || s[2] % factor != 0 ||
        s[3] % factor != 0) {
        throw DimensionError("stunet: z must be [" + std::to_string(batch * config_.frames) +
                             ",1,H,W] with H,W divisible by " + std::to_string(factor) + ", got " + shape_to_string(s));
    }
    if (backbone_cond.shape() != s || side_cond.shape() != s) {
        throw DimensionError("stunet: condition frames " + shape_to_string(backbone_cond.shape()) + " / " +
                             shape_to_string(side_cond.shape()) + " must match z " + shape_to_string(s));
    }
    if (t.size() != batch) {
        throw DimensionError("stunet: expected one time per batch element");
    }
    const ag::Var<T> emb = embed(t, segment_index);

    std::vector<ag::Var<T>> side_feat(scales);
    if (!side_.empty()) {
        ag::Var<T> h = side_in_(side_cond);
        for (std::size_t sc = 0; sc < side_.size(); ++sc) {
            const auto& st = side_[sc];
            if (st.down) h = (*st.down)(h);
            for (const auto& b : st.blocks) h = b(h, ag::Var<T>());
            if (st.temporal) h = (*st.temporal)(h);
            side_feat[sc] = h;
        }
    }
    auto modulate = [&](const ag::Var<T>& h, const std::optional<FilmHead>& head, std::size_t sc) {
        if (!head) return h;
        return ag::film(h, head->scale(side_feat[sc]), head->shift(side_feat[sc]));
    };

    ag::Var<T> h = in_conv_(ag::concat_channels(z, backbone_cond));
    std::vector<ag::Var<T>> skips;
    for (std::size_t sc = 0; sc < scales; ++sc) {
        const auto& st = encoder_[sc];
        if (st.down) h = (*st.down)(h);
        h = modulate(h, enc_film_[sc], sc);
        for (const auto& b : st.blocks) h = b(h, emb);
        h = st.temporal(h);
        skips.push_back(h);
    }
    h = middle_temporal_(middle_(h, emb));
    for (std::size_t sc = scales; sc-- > 0;) {
        const auto& st = decoder_[sc];
        h = modulate(ag::concat_channels(h, skips[sc]), dec_film_[sc], sc);
        for (const auto& b : st.blocks) h = b(h, emb);
        h = st.temporal(h);
        if (st.up) h = (*st.up)(ag::upsample2x(h));
    }
    const ag::Var<T> out = out_conv_(ag::silu(out_norm_(h)));
    if (config_.anchor == Anchor::none) return out;
    BasicTensor<T> inv(s);
    const std::size_t per = inv.numel() / batch;
    for (std::size_t b = 0; b < batch; ++b) {
        const T r = T(1) / std::max(T(1) - t[b], static_cast<T>(config_.min_remaining_time));
        std::fill(inv.data() + b * per, inv.data() + (b + 1) * per, r);
    }
    const auto& anchor = config_.anchor == Anchor::backbone_cond ? backbone_cond : side_cond;
    return ag::mul(ag::sub(ag::add(anchor, out), z), ag::constant(std::move(inv)));
}

template <typename T>
BasicTensor<T> STUNet<T>::velocity(const BasicTensor<T>& z, const ConditionBundle<T>& cond, T t) const {
    ag::NoGradGuard guard;
    std::vector<std::size_t> idx;
    if (cond.segment_index) idx.push_back(*cond.segment_index);
    if (config_.segment_vocab > 0 && idx.empty()) {
        throw ConfigError("stunet: this network requires a segment index condition");
    }
    const T times[1] = {t};
    return forward(ag::constant(z), ag::constant(cond.backbone_cond), ag::constant(cond.side_cond), times, idx, 1)
        .value();
}

template struct SpatialResBlock<float>;
template struct SpatialResBlock<double>;
template struct TemporalAttentionBlock<float>;
template struct TemporalAttentionBlock<double>;
template class STUNet<float>;
template class STUNet<double>;

}  // namespace recticast
