#include "recticast/optim.hpp"

#include <cmath>
#include <numbers>

namespace recticast {

template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr) {
    ++state.step;
    const double b1 = state.config.beta1;
    const double b2 = state.config.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (const auto& [name, var] : params.entries()) {
        if (!var.requires_grad()) {
            continue;
        }
        ag::Var<T> p = var;
        auto& value = p.mutable_value();
        const auto& grad = p.grad();
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.shape() != value.shape()) {
            m = BasicTensor<T>::zeros(value.shape());
            v = BasicTensor<T>::zeros(value.shape());
        }
        for (std::size_t i = 0; i < value.numel(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = lr * (mi / corr1) / (std::sqrt(vi / corr2) + state.config.eps);
            value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
        }
    }
}

double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min) {
    if (total == 0 || step >= total) {
        return lr_min;
    }
    const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total);
    return lr_min + (lr_max - lr_min) * (1.0 + std::cos(phase)) / 2.0;
}

template void adam_step(ParamStore<float>&, AdamState<float>&, double);
template void adam_step(ParamStore<double>&, AdamState<double>&, double);

}  // namespace recticast
