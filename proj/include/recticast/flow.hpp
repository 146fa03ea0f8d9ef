#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "recticast/layers.hpp"
#include "recticast/training.hpp"

namespace recticast::flow {

/// (1 - t) * eps + t * x, elementwise.
template <typename T>
BasicTensor<T> fm_interpolate(const BasicTensor<T>& eps, const BasicTensor<T>& x, T t);

/// One training tuple of the straight noise-to-data path.
template <typename T>
struct FlowSample {
    BasicTensor<T> eps;
    BasicTensor<T> x;
    T t{};
    BasicTensor<T> z;  ///< fm_interpolate(eps, x, t)
    BasicTensor<T> v;  ///< x - eps
};

template <typename T>
FlowSample<T> make_flow_sample(BasicTensor<T> x, T t, Rng& rng);

/// A batch of flow samples stacked along the leading axis: element b owns
/// rows [b*rows_per_item, (b+1)*rows_per_item) of eps/x/z/v and time t[b].
template <typename T>
struct FlowBatch {
    std::size_t batch = 0;
    std::vector<T> t;
    BasicTensor<T> eps;
    BasicTensor<T> x;
    BasicTensor<T> z;
    BasicTensor<T> v;
};

/// Draws t ~ U(0,1) per element and fresh standard-normal eps for every entry.
template <typename T>
FlowBatch<T> make_flow_batch(const BasicTensor<T>& x, std::size_t batch, Rng& rng);

/// Velocity network: (z_t, per-element times) -> predicted velocity, same shape as z_t.
/// Conditions are bound into the callable.
template <typename T>
using VelocityModel = std::function<ag::Var<T>(const ag::Var<T>&, std::span<const T>)>;

/// mean over elements of (model(z_t, t) - (x - eps))^2.
template <typename T>
ag::Var<T> fm_loss(const VelocityModel<T>& model, const FlowBatch<T>& batch);

/// Time-weighted variant: mean over elements of weight(t_b) * (model(z_t, t) - (x - eps))^2.
template <typename T>
ag::Var<T> fm_loss(const VelocityModel<T>& model, const FlowBatch<T>& batch, const std::function<T(T)>& weight);

struct SamplerConfig {
    std::size_t steps = 20;
    std::uint64_t seed = 0;
};

/// Inference-time velocity field v(x, t).
template <typename T>
using VelocityField = std::function<BasicTensor<T>(const BasicTensor<T>&, T)>;

/// Euler integration from x0 at t = 0 to t = 1 in `steps` uniform steps.
template <typename T>
BasicTensor<T> euler_integrate(const VelocityField<T>& field, BasicTensor<T> x0, std::size_t steps);

/// Draws x0 ~ N(0, I) of `shape` from cfg.seed and integrates to t = 1.
template <typename T>
BasicTensor<T> euler_sample(const VelocityField<T>& field, const SamplerConfig& cfg, const Shape& shape);

template <typename T>
BasicTensor<T> standard_normal(const Shape& shape, Rng& rng);

/// Sinusoidal embedding of times in [0,1] (scaled by 1000) -> [B, dim].
template <typename T>
BasicTensor<T> timestep_embedding(std::span<const T> t, std::size_t dim);

/// Small MLP velocity field on scalars: [z, embed(t)] -> v. Used to validate
/// the flow-matching objective on one-dimensional targets.
class ToyVelocityNet {
public:
    explicit ToyVelocityNet(std::uint64_t seed, std::size_t hidden = 64, std::size_t time_dim = 16);

    ag::Var<float> forward(const ag::Var<float>& z, std::span<const float> t) const;
    Tensor velocity(const Tensor& z, float t) const;
    ParamStore<float>& params() { return params_; }

private:
    std::size_t time_dim_;
    ParamStore<float> params_;
    LinearLayer<float> in_;
    LinearLayer<float> time_;
    LinearLayer<float> mid_;
    LinearLayer<float> out_;
};

struct ToyFlowOptions {
    std::size_t steps = 1500;
    std::size_t batch = 256;
    double lr_max = 3e-3;
    double lr_min = 1e-5;
    std::uint64_t seed = 0;
};

struct ToyFlow {
    ToyVelocityNet net;
    std::vector<double> losses;
};

/// Fits the flow for the target {a w.p. 1/2, b w.p. 1/2}.
ToyFlow fit_flow_toy(double a, double b, const ToyFlowOptions& options);

/// n Euler samples from a fitted toy flow.
std::vector<double> sample_toy(const ToyFlow& flow, std::size_t n, std::size_t steps, std::uint64_t seed);

}  // namespace recticast::flow
