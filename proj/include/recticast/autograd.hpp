#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "recticast/tensor.hpp"

namespace recticast::ag {

template <typename T>
struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    BasicTensor<T>& ensure_grad() {
        if (grad.shape() != value.shape() || grad.numel() != value.numel()) {
            grad = BasicTensor<T>::zeros(value.shape());
        }
        return grad;
    }
    bool has_grad() const { return grad.numel() == value.numel() && grad.shape() == value.shape(); }
};

/// Handle to a node of the dynamically recorded computation graph. Copies
/// share the node. Intermediate nodes live as long as some downstream
/// handle references them.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(BasicTensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return node_ != nullptr; }
    const BasicTensor<T>& value() const { return node_->value; }
    BasicTensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    /// Gradient accumulated by backward(); zeros if nothing reached this node.
    BasicTensor<T>& grad() { return node_->ensure_grad(); }
    void zero_grad() {
        if (node_->has_grad()) {
            node_->grad.fill(T{0});
        }
    }

    /// Reverse-mode sweep from this scalar node. Gradients accumulate.
    void backward();

    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

template <typename T>
Var<T> constant(BasicTensor<T> value) {
    return Var<T>(std::move(value), false);
}

// Elementwise
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);

// Shape
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> slice0(const Var<T>& a, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat0(const std::vector<Var<T>>& parts);
/// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// Layers
/// x [N,Cin,H,W], w [Cout,Cin,k,k], b [Cout] (may be undefined).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t padding);
/// Nearest-neighbour 2x upsampling of [N,C,H,W].
template <typename T> Var<T> upsample2x(const Var<T>& x);
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups, T eps = T(1e-5));
/// x [N,in], w [out,in], b [out] (may be undefined) -> [N,out]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
/// [N,C,H,W] -> [N,C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
/// x [N,C,H,W] scaled per (image, channel) by gate [N,C].
template <typename T> Var<T> channel_gate(const Var<T>& x, const Var<T>& gate);
/// x [N,C,H,W] plus e [G,C]; each run of N/G consecutive images receives e[g].
template <typename T> Var<T> add_group_bias(const Var<T>& x, const Var<T>& e);
/// (1 + scale) * x + shift. scale/shift are [N,C] (per channel) or x-shaped (per element).
template <typename T> Var<T> film(const Var<T>& x, const Var<T>& scale, const Var<T>& shift);
/// Rows of table [V,D] selected by indices -> [B,D].
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const std::size_t> indices);

// Reductions
template <typename T> Var<T> mean(const Var<T>& a);
/// mean((pred - target)^2) as a scalar.
template <typename T> Var<T> mse_loss(const Var<T>& pred, const Var<T>& target);

}  // namespace recticast::ag
