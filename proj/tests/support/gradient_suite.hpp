#pragma once

#include <string>
#include <vector>

#include "recticast/backbone.hpp"
#include "recticast/stunet.hpp"
#include "support/gradcheck.hpp"

namespace recticast::testing {

struct GradCase {
    std::string name;
    std::function<GradCheckResult(std::uint64_t seed)> run;
};

/// Zero-initialized layers would hide gradient paths, so every parameter is
/// redrawn before checking.
inline void randomize(ParamStore<double>& params, Rng& rng, double scale = 0.4) {
    for (auto& [name, var] : params.entries()) {
        auto v = var;
        for (auto& x : v.mutable_value().span()) x = scale * rng.normal();
    }
}

inline std::vector<ag::Var<double>> param_vars(const ParamStore<double>& params) {
    std::vector<ag::Var<double>> out;
    for (const auto& [name, var] : params.entries()) out.push_back(var);
    return out;
}

inline ag::Var<double> leaf(const Shape& shape, Rng& rng, double scale = 1.0) {
    return ag::Var<double>(random_tensor(shape, rng, scale), true);
}

/// A case on fresh leaves: build(rng) returns (inputs, output-producing closure).
template <typename Build>
GradCase op_case(std::string name, Build build, std::size_t probes = 0) {
    return {name, [build, probes](std::uint64_t seed) {
                Rng rng(seed);
                auto [inputs, fn] = build(rng);
                const auto out_shape = fn().shape();
                const auto r = random_tensor(out_shape, rng);
                return grad_check([&] { return project(fn(), r); }, inputs, rng, probes);
            }};
}

using Inputs = std::vector<ag::Var<double>>;
using Fn = std::function<ag::Var<double>()>;

inline std::vector<GradCase> gradient_cases() {
    std::vector<GradCase> cases;
    cases.push_back(op_case("add", [](Rng& rng) {
        auto a = leaf({2, 3}, rng), b = leaf({2, 3}, rng);
        return std::pair<Inputs, Fn>{{a, b}, [=] { return ag::add(a, b); }};
    }));
    cases.push_back(op_case("sub", [](Rng& rng) {
        auto a = leaf({3, 2}, rng), b = leaf({3, 2}, rng);
        return std::pair<Inputs, Fn>{{a, b}, [=] { return ag::sub(a, b); }};
    }));
    cases.push_back(op_case("mul", [](Rng& rng) {
        auto a = leaf({4}, rng), b = leaf({4}, rng);
        return std::pair<Inputs, Fn>{{a, b}, [=] { return ag::mul(a, ag::mul(a, b)); }};
    }));
    cases.push_back(op_case("scale", [](Rng& rng) {
        auto a = leaf({5}, rng);
        return std::pair<Inputs, Fn>{{a}, [=] { return ag::scale(a, -1.7); }};
    }));
    cases.push_back(op_case("silu", [](Rng& rng) {
        auto a = leaf({2, 5}, rng, 2.0);
        return std::pair<Inputs, Fn>{{a}, [=] { return ag::silu(a); }};
    }));
    cases.push_back(op_case("sigmoid", [](Rng& rng) {
        auto a = leaf({2, 5}, rng, 2.0);
        return std::pair<Inputs, Fn>{{a}, [=] { return ag::sigmoid(a); }};
    }));
    cases.push_back(op_case("reshape+slice0", [](Rng& rng) {
        auto a = leaf({4, 6}, rng);
        return std::pair<Inputs, Fn>{{a}, [=] { return ag::slice0(ag::reshape(a, {8, 3}), 2, 7); }};
    }));
    cases.push_back(op_case("concat0", [](Rng& rng) {
        auto a = leaf({2, 3}, rng), b = leaf({1, 3}, rng);
        return std::pair<Inputs, Fn>{{a, b}, [=] { return ag::silu(ag::concat0<double>({a, b, a})); }};
    }));
    cases.push_back(op_case("concat_channels", [](Rng& rng) {
        auto a = leaf({2, 1, 3, 3}, rng), b = leaf({2, 2, 3, 3}, rng);
        return std::pair<Inputs, Fn>{{a, b}, [=] { return ag::concat_channels(a, b); }};
    }));
    for (std::size_t stride : {1, 2}) {
        for (std::size_t k : {1, 3}) {
            for (bool bias : {true, false}) {
                const std::string name = "conv2d k" + std::to_string(k) + " s" + std::to_string(stride) +
                                         (bias ? " bias" : " nobias");
                cases.push_back(op_case(name, [=](Rng& rng) {
                    auto x = leaf({2, 3, 6, 6}, rng);
                    auto w = leaf({4, 3, k, k}, rng, 0.5);
                    auto b = bias ? leaf({4}, rng) : ag::Var<double>();
                    Inputs in{x, w};
                    if (bias) in.push_back(b);
                    return std::pair<Inputs, Fn>{in, [=] { return ag::conv2d(x, w, b, stride, k / 2); }};
                }));
            }
        }
    }
    cases.push_back(op_case("upsample2x", [](Rng& rng) {
        auto x = leaf({1, 2, 3, 2}, rng);
        return std::pair<Inputs, Fn>{{x}, [=] { return ag::upsample2x(x); }};
    }));
    cases.push_back(op_case("group_norm", [](Rng& rng) {
        auto x = leaf({2, 4, 3, 3}, rng, 2.0);
        auto g = leaf({4}, rng), b = leaf({4}, rng);
        return std::pair<Inputs, Fn>{{x, g, b}, [=] { return ag::group_norm(x, g, b, 2); }};
    }));
    cases.push_back(op_case("linear", [](Rng& rng) {
        auto x = leaf({3, 4}, rng), w = leaf({2, 4}, rng), b = leaf({2}, rng);
        return std::pair<Inputs, Fn>{{x, w, b}, [=] { return ag::linear(x, w, b); }};
    }));
    cases.push_back(op_case("global_avg_pool", [](Rng& rng) {
        auto x = leaf({2, 3, 2, 3}, rng);
        return std::pair<Inputs, Fn>{{x}, [=] { return ag::global_avg_pool(x); }};
    }));
    cases.push_back(op_case("channel_gate", [](Rng& rng) {
        auto x = leaf({2, 3, 2, 2}, rng), g = leaf({2, 3}, rng);
        return std::pair<Inputs, Fn>{{x, g}, [=] { return ag::channel_gate(x, g); }};
    }));
    cases.push_back(op_case("add_group_bias", [](Rng& rng) {
        auto x = leaf({4, 3, 2, 2}, rng), e = leaf({2, 3}, rng);
        return std::pair<Inputs, Fn>{{x, e}, [=] { return ag::add_group_bias(x, e); }};
    }));
    cases.push_back(op_case("film per-channel", [](Rng& rng) {
        auto x = leaf({2, 3, 2, 2}, rng), s = leaf({2, 3}, rng), b = leaf({2, 3}, rng);
        return std::pair<Inputs, Fn>{{x, s, b}, [=] { return ag::film(x, s, b); }};
    }));
    cases.push_back(op_case("film per-element", [](Rng& rng) {
        auto x = leaf({2, 3, 2, 2}, rng), s = leaf({2, 3, 2, 2}, rng), b = leaf({2, 3, 2, 2}, rng);
        return std::pair<Inputs, Fn>{{x, s, b}, [=] { return ag::film(x, s, b); }};
    }));
    cases.push_back(op_case("embedding", [](Rng& rng) {
        auto table = leaf({4, 3}, rng);
        return std::pair<Inputs, Fn>{{table}, [=] {
                                         const std::size_t idx[] = {2, 0, 2};
                                         return ag::embedding(table, idx);
                                     }};
    }));
    cases.push_back(op_case("mse_loss", [](Rng& rng) {
        auto a = leaf({2, 3}, rng), b = leaf({2, 3}, rng);
        return std::pair<Inputs, Fn>{{a, b}, [=] { return ag::mse_loss(a, b); }};
    }));

    cases.push_back(op_case("Conv2dLayer", [](Rng& rng) {
        auto store = std::make_shared<ParamStore<double>>();
        Conv2dLayer<double> layer(*store, "c", 2, 3, 3, 2, rng);
        randomize(*store, rng);
        auto x = leaf({1, 2, 5, 5}, rng);
        auto in = param_vars(*store);
        in.push_back(x);
        return std::pair<Inputs, Fn>{in, [=] { return layer(x); }};
    }));
    cases.push_back(op_case("LinearLayer", [](Rng& rng) {
        auto store = std::make_shared<ParamStore<double>>();
        LinearLayer<double> layer(*store, "l", 3, 2, rng);
        randomize(*store, rng);
        auto x = leaf({2, 3}, rng);
        auto in = param_vars(*store);
        in.push_back(x);
        return std::pair<Inputs, Fn>{in, [=] { return layer(x); }};
    }));
    cases.push_back(op_case("GroupNormLayer", [](Rng& rng) {
        auto store = std::make_shared<ParamStore<double>>();
        GroupNormLayer<double> layer(*store, "g", 6);
        randomize(*store, rng);
        auto x = leaf({2, 6, 2, 2}, rng);
        auto in = param_vars(*store);
        in.push_back(x);
        return std::pair<Inputs, Fn>{in, [=] { return layer(x); }};
    }));
    cases.push_back(op_case("ChannelAttention", [](Rng& rng) {
        auto store = std::make_shared<ParamStore<double>>();
        ChannelAttention<double> layer(*store, "a", 4, 2, rng);
        randomize(*store, rng);
        auto x = leaf({2, 4, 2, 2}, rng);
        auto in = param_vars(*store);
        in.push_back(x);
        return std::pair<Inputs, Fn>{in, [=] { return layer(x); }};
    }));
    cases.push_back(op_case("SpatialResBlock", [](Rng& rng) {
        auto store = std::make_shared<ParamStore<double>>();
        SpatialResBlock<double> block(*store, "r", 2, 4, 3, rng);
        randomize(*store, rng);
        auto x = leaf({2, 2, 4, 4}, rng);
        auto e = leaf({2, 3}, rng);
        auto in = param_vars(*store);
        in.push_back(x);
        in.push_back(e);
        return std::pair<Inputs, Fn>{in, [=] { return block(x, e); }};
    }));
    cases.push_back(op_case("TemporalAttentionBlock", [](Rng& rng) {
        auto store = std::make_shared<ParamStore<double>>();
        TemporalAttentionBlock<double> block(*store, "t", 2, 2, 2, rng);
        randomize(*store, rng);
        auto x = leaf({4, 2, 3, 3}, rng);
        auto in = param_vars(*store);
        in.push_back(x);
        return std::pair<Inputs, Fn>{in, [=] { return block(x); }};
    }));

    cases.push_back(op_case(
        "BackboneModel",
        [](Rng& rng) {
            BackboneConfig c{4, 8, 1, 2, 3, 8, 8};
            auto model = std::make_shared<BackboneModel<double>>(c, rng.next_u64());
            randomize(model->params(), rng);
            auto x = leaf({4, 1, 8, 8}, rng);
            auto in = param_vars(model->params());
            in.push_back(x);
            return std::pair<Inputs, Fn>{in, [=] { return model->forward(x, 2); }};
        },
        3));
    cases.push_back(op_case(
        "STUNet",
        [](Rng& rng) {
            STUNetConfig c;
            c.frames = 2;
            c.base_channels = 4;
            c.time_dim = 8;
            c.embed_dim = 8;
            c.segment_vocab = 3;
            c.temporal_reduction = 2;
            auto net = std::make_shared<STUNet<double>>(c, rng.next_u64());
            randomize(net->params(), rng, 0.3);
            auto z = leaf({4, 1, 8, 8}, rng);
            auto bc = leaf({4, 1, 8, 8}, rng);
            auto sc = leaf({4, 1, 8, 8}, rng);
            const std::vector<double> t{rng.uniform(), rng.uniform()};
            const std::vector<std::size_t> idx{1, 2};
            auto in = param_vars(net->params());
            in.insert(in.end(), {z, bc, sc});
            return std::pair<Inputs, Fn>{in, [=] { return net->forward(z, bc, sc, t, idx, 2); }};
        },
        3));
    cases.push_back(op_case(
        "STUNet 2-scale",
        [](Rng& rng) {
            STUNetConfig c;
            c.frames = 2;
            c.base_channels = 8;
            c.channel_mults = {1, 1};
            c.side_scales = {1};
            c.time_dim = 8;
            c.embed_dim = 8;
            c.temporal_reduction = 4;
            auto net = std::make_shared<STUNet<double>>(c, rng.next_u64());
            randomize(net->params(), rng, 0.3);
            auto z = leaf({2, 1, 4, 4}, rng);
            auto bc = leaf({2, 1, 4, 4}, rng);
            auto sc = leaf({2, 1, 4, 4}, rng);
            const std::vector<double> t{rng.uniform()};
            auto in = param_vars(net->params());
            in.insert(in.end(), {z, bc, sc});
            return std::pair<Inputs, Fn>{in, [=] { return net->forward(z, bc, sc, t, {}, 1); }};
        },
        3));
    return cases;
}

}  // namespace recticast::testing
