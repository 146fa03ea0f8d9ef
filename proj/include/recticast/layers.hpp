#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recticast/autograd.hpp"
#include "recticast/rng.hpp"

namespace recticast {

/// Named trainable parameters, kept in registration order so that
/// serialization and optimizer updates are deterministic.
template <typename T>
class ParamStore {
public:
    ag::Var<T> add(const std::string& name, BasicTensor<T> init);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    ag::Var<T>& get(const std::string& name);
    const ag::Var<T>& get(const std::string& name) const;
    BasicTensor<T>& grad(const std::string& name) { return get(name).grad(); }

    const std::vector<std::pair<std::string, ag::Var<T>>>& entries() const { return entries_; }
    std::vector<std::string> names() const;
    std::size_t size() const { return entries_.size(); }
    /// Total scalar parameter count.
    std::size_t element_count() const;

    void zero_grad();
    /// Frozen parameters are excluded from graph recording and updates.
    void set_trainable(bool trainable);
    bool trainable() const;

    /// Copies values from `other` by name. Every name must exist with the same shape.
    void load_values(const std::vector<std::pair<std::string, BasicTensor<T>>>& values);

private:
    std::vector<std::pair<std::string, ag::Var<T>>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv/linear layers.
template <typename T>
BasicTensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);

template <typename T>
struct Conv2dLayer {
    ag::Var<T> weight;
    ag::Var<T> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
                std::size_t kernel, std::size_t stride, Rng& rng, bool zero_init = false);
    ag::Var<T> operator()(const ag::Var<T>& x) const;
};

template <typename T>
struct LinearLayer {
    ag::Var<T> weight;
    ag::Var<T> bias;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& store, const std::string& name, std::size_t in_features, std::size_t out_features,
                Rng& rng, bool zero_init = false);
    ag::Var<T> operator()(const ag::Var<T>& x) const;
};

/// Group normalization with min(8, C) groups.
template <typename T>
struct GroupNormLayer {
    ag::Var<T> gamma;
    ag::Var<T> beta;
    std::size_t groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore<T>& store, const std::string& name, std::size_t channels);
    ag::Var<T> operator()(const ag::Var<T>& x) const;
};

inline std::size_t norm_groups(std::size_t channels) {
    std::size_t g = std::min<std::size_t>(8, channels);
    while (g > 1 && channels % g != 0) --g;
    return g;
}

/// Squeeze-excitation style gate: x * sigmoid(W2 silu(W1 avg(x))).
template <typename T>
struct ChannelAttention {
    LinearLayer<T> squeeze;
    LinearLayer<T> excite;

    ChannelAttention() = default;
    ChannelAttention(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t reduction,
                     Rng& rng);
    ag::Var<T> operator()(const ag::Var<T>& x) const;
};

// Tensor-level (non-recording) kernels.

/// Cross-correlation of x [C_in,H,W] with kernel [C_out,C_in,k,k].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t padding);

/// Window max over non-overlapping k x k blocks of [C,H,W] or [N,C,H,W].
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t k);

/// (1 + scale[c]) * features[c,h,w] + shift[c] for features [C,H,W].
template <typename T>
BasicTensor<T> film_modulate(const BasicTensor<T>& features, const BasicTensor<T>& scale, const BasicTensor<T>& shift);

/// Channel attention on [C,H,W] (or [N,C,H,W]) with the given weights.
template <typename T>
BasicTensor<T> channel_attention(const BasicTensor<T>& features, const ChannelAttention<T>& weights);

}  // namespace recticast
