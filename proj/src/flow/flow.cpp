#include "recticast/flow.hpp"

#include <cmath>

namespace recticast::flow {

template <typename T>
BasicTensor<T> fm_interpolate(const BasicTensor<T>& eps, const BasicTensor<T>& x, T t) {
    require_same_shape(eps, x, "fm_interpolate");
    if (!(t >= T{0} && t <= T{1})) {
        throw ConfigError("fm_interpolate: t must lie in [0,1]");
    }
    BasicTensor<T> z(x.shape());
    const T a = T{1} - t;
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = a * eps[i] + t * x[i];
    return z;
}

template <typename T>
BasicTensor<T> standard_normal(const Shape& shape, Rng& rng) {
    BasicTensor<T> out(shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(rng.normal());
    return out;
}

template <typename T>
FlowSample<T> make_flow_sample(BasicTensor<T> x, T t, Rng& rng) {
    FlowSample<T> s;
    s.eps = standard_normal<T>(x.shape(), rng);
    s.x = std::move(x);
    s.t = t;
    s.z = fm_interpolate(s.eps, s.x, t);
    s.v = BasicTensor<T>(s.x.shape());
    for (std::size_t i = 0; i < s.v.numel(); ++i) s.v[i] = s.x[i] - s.eps[i];
    return s;
}

template <typename T>
FlowBatch<T> make_flow_batch(const BasicTensor<T>& x, std::size_t batch, Rng& rng) {
    if (batch == 0 || x.dim() == 0 || x.shape()[0] % batch != 0) {
        throw DimensionError("make_flow_batch: leading axis " + shape_to_string(x.shape()) +
                             " not divisible into " + std::to_string(batch) + " elements");
    }
    FlowBatch<T> fb;
    fb.batch = batch;
    fb.x = x;
    fb.t.resize(batch);
    for (auto& t : fb.t) t = static_cast<T>(rng.uniform());
    fb.eps = standard_normal<T>(x.shape(), rng);
    fb.z = BasicTensor<T>(x.shape());
    fb.v = BasicTensor<T>(x.shape());
    const std::size_t per = x.numel() / batch;
    for (std::size_t b = 0; b < batch; ++b) {
        const T t = fb.t[b];
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            fb.z[i] = (T{1} - t) * fb.eps[i] + t * x[i];
            fb.v[i] = x[i] - fb.eps[i];
        }
    }
    return fb;
}

template <typename T>
ag::Var<T> fm_loss(const VelocityModel<T>& model, const FlowBatch<T>& batch) {
    if (batch.batch == 0) {
        throw ConfigError("fm_loss: empty batch");
    }
    ag::Var<T> pred = model(ag::constant(batch.z), std::span<const T>(batch.t));
    if (!pred.value().all_finite()) {
        throw NumericError("fm_loss: velocity model produced non-finite output");
    }
    return ag::mse_loss(pred, ag::constant(batch.v));
}

template <typename T>
ag::Var<T> fm_loss(const VelocityModel<T>& model, const FlowBatch<T>& batch, const std::function<T(T)>& weight) {
    if (batch.batch == 0) {
        throw ConfigError("fm_loss: empty batch");
    }
    ag::Var<T> pred = model(ag::constant(batch.z), std::span<const T>(batch.t));
    if (!pred.value().all_finite()) {
        throw NumericError("fm_loss: velocity model produced non-finite output");
    }
    BasicTensor<T> w(batch.v.shape());
    const std::size_t per = w.numel() / batch.batch;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        const T wb = weight(batch.t[b]);
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) w[i] = wb;
    }
    const ag::Var<T> d = ag::sub(pred, ag::constant(batch.v));
    return ag::mean(ag::mul(ag::mul(d, d), ag::constant(std::move(w))));
}

template <typename T>
BasicTensor<T> euler_integrate(const VelocityField<T>& field, BasicTensor<T> x, std::size_t steps) {
    if (steps == 0) {
        throw ConfigError("euler: steps must be >= 1");
    }
    const T dt = T{1} / static_cast<T>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const T t = static_cast<T>(k) / static_cast<T>(steps);
        const BasicTensor<T> v = field(x, t);
        require_same_shape(v, x, "euler velocity");
        for (std::size_t i = 0; i < x.numel(); ++i) x[i] += dt * v[i];
        if (!x.all_finite()) {
            throw NumericError("euler: non-finite state after step " + std::to_string(k));
        }
    }
    return x;
}

template <typename T>
BasicTensor<T> euler_sample(const VelocityField<T>& field, const SamplerConfig& cfg, const Shape& shape) {
    Rng rng(cfg.seed);
    return euler_integrate(field, standard_normal<T>(shape, rng), cfg.steps);
}

template <typename T>
BasicTensor<T> timestep_embedding(std::span<const T> t, std::size_t dim) {
    if (dim < 2 || dim % 2 != 0) {
        throw ConfigError("timestep embedding dimension must be even and >= 2");
    }
    const std::size_t half = dim / 2;
    BasicTensor<T> out(Shape{t.size(), dim});
    for (std::size_t b = 0; b < t.size(); ++b) {
        const double tt = 1000.0 * static_cast<double>(t[b]);
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            out[b * dim + i] = static_cast<T>(std::sin(tt * freq));
            out[b * dim + half + i] = static_cast<T>(std::cos(tt * freq));
        }
    }
    return out;
}

#define RECTICAST_INSTANTIATE_FLOW(T)                                                                   \
    template BasicTensor<T> fm_interpolate(const BasicTensor<T>&, const BasicTensor<T>&, T);            \
    template FlowSample<T> make_flow_sample(BasicTensor<T>, T, Rng&);                                   \
    template FlowBatch<T> make_flow_batch(const BasicTensor<T>&, std::size_t, Rng&);                    \
    template ag::Var<T> fm_loss(const VelocityModel<T>&, const FlowBatch<T>&);                          \
    template ag::Var<T> fm_loss(const VelocityModel<T>&, const FlowBatch<T>&, const std::function<T(T)>&); \
    template BasicTensor<T> euler_integrate(const VelocityField<T>&, BasicTensor<T>, std::size_t);      \
    template BasicTensor<T> euler_sample(const VelocityField<T>&, const SamplerConfig&, const Shape&);  \
    template BasicTensor<T> standard_normal(const Shape&, Rng&);                                        \
    template BasicTensor<T> timestep_embedding(std::span<const T>, std::size_t);

RECTICAST_INSTANTIATE_FLOW(float)
RECTICAST_INSTANTIATE_FLOW(double)

ToyVelocityNet::ToyVelocityNet(std::uint64_t seed, std::size_t hidden, std::size_t time_dim) : time_dim_(time_dim) {
    Rng rng(seed);
    in_ = LinearLayer<float>(params_, "in", 1, hidden, rng);
    time_ = LinearLayer<float>(params_, "time", time_dim, hidden, rng);
    mid_ = LinearLayer<float>(params_, "mid", hidden, hidden, rng);
    out_ = LinearLayer<float>(params_, "out", hidden, 1, rng);
}

ag::Var<float> ToyVelocityNet::forward(const ag::Var<float>& z, std::span<const float> t) const {
    const std::size_t n = z.value().numel();
    if (t.size() != n) {
        throw DimensionError("toy flow: one time per scalar sample required");
    }
    auto zz = ag::reshape(z, {n, 1});
    auto emb = ag::constant(timestep_embedding<float>(t, time_dim_));
    auto h = ag::silu(ag::add(in_(zz), time_(emb)));
    h = ag::silu(mid_(h));
    return ag::reshape(out_(h), z.shape());
}

Tensor ToyVelocityNet::velocity(const Tensor& z, float t) const {
    ag::NoGradGuard guard;
    std::vector<float> times(z.numel(), t);
    return forward(ag::constant(z), times).value();
}

ToyFlow fit_flow_toy(double a, double b, const ToyFlowOptions& options) {
    ToyFlow flow{ToyVelocityNet(options.seed), {}};
    AdamState<float> adam;
    TrainOptions train;
    train.steps = options.steps;
    train.batch = options.batch;
    train.lr_max = options.lr_max;
    train.lr_min = options.lr_min;
    train.seed = options.seed;
    ToyVelocityNet& net = flow.net;
    auto result = run_training(net.params(), adam, train, [&](Rng& rng, std::size_t) {
        Tensor x(Shape{options.batch});
        for (std::size_t i = 0; i < options.batch; ++i) {
            x[i] = static_cast<float>(rng.uniform() < 0.5 ? a : b);
        }
        auto fb = make_flow_batch<float>(x, options.batch, rng);
        return fm_loss<float>([&](const ag::Var<float>& z, std::span<const float> t) { return net.forward(z, t); },
                              fb);
    });
    flow.losses = std::move(result.losses);
    return flow;
}

std::vector<double> sample_toy(const ToyFlow& flow, std::size_t n, std::size_t steps, std::uint64_t seed) {
    const Tensor out = euler_sample<float>([&](const Tensor& x, float t) { return flow.net.velocity(x, t); },
                                           SamplerConfig{steps, seed}, Shape{n});
    return std::vector<double>(out.storage().begin(), out.storage().end());
}

}  // namespace recticast::flow
