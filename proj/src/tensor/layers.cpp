#include "recticast/layers.hpp"

#include <cmath>
#include <limits>

namespace recticast {

template <typename T>
ag::Var<T> ParamStore<T>::add(const std::string& name, BasicTensor<T> init) {
    if (index_.count(name)) {
        throw ConfigError("duplicate parameter name '" + name + "'");
    }
    ag::Var<T> v(std::move(init), true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, v);
    return v;
}

template <typename T>
ag::Var<T>& ParamStore<T>::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ConfigError("unknown parameter '" + name + "'");
    }
    return entries_[it->second].second;
}

template <typename T>
const ag::Var<T>& ParamStore<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ConfigError("unknown parameter '" + name + "'");
    }
    return entries_[it->second].second;
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

template <typename T>
std::size_t ParamStore<T>::element_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.value().numel();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
}

template <typename T>
void ParamStore<T>::set_trainable(bool trainable) {
    for (auto& [_, v] : entries_) v.set_requires_grad(trainable);
}

template <typename T>
bool ParamStore<T>::trainable() const {
    for (const auto& [_, v] : entries_) {
        if (v.requires_grad()) return true;
    }
    return false;
}

template <typename T>
void ParamStore<T>::load_values(const std::vector<std::pair<std::string, BasicTensor<T>>>& values) {
    if (values.size() != entries_.size()) {
        throw FormatError("parameter count mismatch: have " + std::to_string(entries_.size()) + ", loading " +
                          std::to_string(values.size()));
    }
    for (const auto& [name, value] : values) {
        if (!contains(name)) {
            throw FormatError("checkpoint has unknown parameter '" + name + "'");
        }
        auto& v = get(name);
        if (v.shape() != value.shape()) {
            throw FormatError("parameter '" + name + "' shape " + shape_to_string(value.shape()) + " expected " +
                              shape_to_string(v.shape()));
        }
        v.mutable_value() = value;
    }
}

template <typename T>
BasicTensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    BasicTensor<T> out(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(rng.uniform(-bound, bound));
    return out;
}

template <typename T>
Conv2dLayer<T>::Conv2dLayer(ParamStore<T>& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
                            std::size_t kernel, std::size_t stride_, Rng& rng, bool zero_init)
    : stride(stride_), padding(kernel / 2) {
    const std::size_t fan_in = in_ch * kernel * kernel;
    Shape ws{out_ch, in_ch, kernel, kernel};
    weight = store.add(name + ".weight", zero_init ? BasicTensor<T>(ws) : fan_in_uniform<T>(ws, fan_in, rng));
    bias = store.add(name + ".bias",
                     zero_init ? BasicTensor<T>(Shape{out_ch}) : fan_in_uniform<T>(Shape{out_ch}, fan_in, rng));
}

template <typename T>
ag::Var<T> Conv2dLayer<T>::operator()(const ag::Var<T>& x) const {
    return ag::conv2d(x, weight, bias, stride, padding);
}

template <typename T>
LinearLayer<T>::LinearLayer(ParamStore<T>& store, const std::string& name, std::size_t in_features,
                            std::size_t out_features, Rng& rng, bool zero_init) {
    Shape ws{out_features, in_features};
    weight = store.add(name + ".weight", zero_init ? BasicTensor<T>(ws) : fan_in_uniform<T>(ws, in_features, rng));
    bias = store.add(name + ".bias", zero_init ? BasicTensor<T>(Shape{out_features})
                                               : fan_in_uniform<T>(Shape{out_features}, in_features, rng));
}

template <typename T>
ag::Var<T> LinearLayer<T>::operator()(const ag::Var<T>& x) const {
    return ag::linear(x, weight, bias);
}

template <typename T>
GroupNormLayer<T>::GroupNormLayer(ParamStore<T>& store, const std::string& name, std::size_t channels)
    : groups(norm_groups(channels)) {
    gamma = store.add(name + ".gamma", BasicTensor<T>(Shape{channels}, T{1}));
    beta = store.add(name + ".beta", BasicTensor<T>(Shape{channels}));
}

template <typename T>
ag::Var<T> GroupNormLayer<T>::operator()(const ag::Var<T>& x) const {
    return ag::group_norm(x, gamma, beta, groups);
}

template <typename T>
ChannelAttention<T>::ChannelAttention(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                      std::size_t reduction, Rng& rng) {
    if (reduction == 0 || channels % reduction != 0) {
        throw DimensionError("channel attention: reduction " + std::to_string(reduction) + " must divide " +
                             std::to_string(channels) + " channels");
    }
    squeeze = LinearLayer<T>(store, name + ".squeeze", channels, channels / reduction, rng);
    excite = LinearLayer<T>(store, name + ".excite", channels / reduction, channels, rng);
}

template <typename T>
ag::Var<T> ChannelAttention<T>::operator()(const ag::Var<T>& x) const {
    auto gate = ag::sigmoid(excite(ag::silu(squeeze(ag::global_avg_pool(x)))));
    return ag::channel_gate(x, gate);
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t padding) {
    if (input.dim() != 3 || kernel.dim() != 4) {
        throw DimensionError("conv2d: expected input [C,H,W] and kernel [Co,Ci,k,k]");
    }
    if (kernel.shape()[1] != input.shape()[0]) {
        throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.shape()[1]) +
                             " input channels, input has " + std::to_string(input.shape()[0]));
    }
    ag::NoGradGuard guard;
    auto x = ag::constant(input.reshaped({1, input.shape()[0], input.shape()[1], input.shape()[2]}));
    auto out = ag::conv2d(x, ag::constant(kernel), ag::constant(bias), 1, padding).value();
    return std::move(out).reshaped({out.shape()[1], out.shape()[2], out.shape()[3]});
}

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t k) {
    if (input.dim() != 3 && input.dim() != 4) {
        throw DimensionError("max_pool2d: expected [C,H,W] or [N,C,H,W], got " + shape_to_string(input.shape()));
    }
    const std::size_t h = input.shape()[input.dim() - 2];
    const std::size_t w = input.shape()[input.dim() - 1];
    if (k == 0 || h % k != 0 || w % k != 0) {
        throw DimensionError("max_pool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                             " not divisible by " + std::to_string(k));
    }
    const std::size_t planes = input.numel() / (h * w);
    Shape out_shape = input.shape();
    out_shape[input.dim() - 2] = h / k;
    out_shape[input.dim() - 1] = w / k;
    BasicTensor<T> out(out_shape, -std::numeric_limits<T>::infinity());
    const std::size_t oh = h / k, ow = w / k;
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = input.data() + p * h * w;
        T* dst = out.data() + p * oh * ow;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                T& cell = dst[(y / k) * ow + x / k];
                cell = std::max(cell, src[y * w + x]);
            }
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> film_modulate(const BasicTensor<T>& features, const BasicTensor<T>& scale,
                             const BasicTensor<T>& shift) {
    if (features.dim() != 3) {
        throw DimensionError("film_modulate: features must be [C,H,W]");
    }
    const std::size_t c = features.shape()[0];
    if (scale.numel() != c || shift.numel() != c) {
        throw DimensionError("film_modulate: " + std::to_string(c) + " channels but scale/shift sizes " +
                             std::to_string(scale.numel()) + "/" + std::to_string(shift.numel()));
    }
    ag::NoGradGuard guard;
    auto x = ag::constant(features.reshaped({1, c, features.shape()[1], features.shape()[2]}));
    auto out = ag::film(x, ag::constant(scale.reshaped({1, c})), ag::constant(shift.reshaped({1, c}))).value();
    return std::move(out).reshaped(features.shape());
}

template <typename T>
BasicTensor<T> channel_attention(const BasicTensor<T>& features, const ChannelAttention<T>& weights) {
    ag::NoGradGuard guard;
    if (features.dim() == 3) {
        auto x = ag::constant(features.reshaped({1, features.shape()[0], features.shape()[1], features.shape()[2]}));
        return weights(x).value().reshaped(features.shape());
    }
    return weights(ag::constant(features)).value();
}

#define RECTICAST_INSTANTIATE_LAYERS(T)                                                                     \
    template class ParamStore<T>;                                                                           \
    template BasicTensor<T> fan_in_uniform<T>(Shape, std::size_t, Rng&);                                    \
    template struct Conv2dLayer<T>;                                                                         \
    template struct LinearLayer<T>;                                                                         \
    template struct GroupNormLayer<T>;                                                                      \
    template struct ChannelAttention<T>;                                                                    \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                   std::size_t);                                                            \
    template BasicTensor<T> max_pool2d(const BasicTensor<T>&, std::size_t);                                 \
    template BasicTensor<T> film_modulate(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
    template BasicTensor<T> channel_attention(const BasicTensor<T>&, const ChannelAttention<T>&);

RECTICAST_INSTANTIATE_LAYERS(float)
RECTICAST_INSTANTIATE_LAYERS(double)

}  // namespace recticast
