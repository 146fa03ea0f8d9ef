#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "recticast/layers.hpp"

namespace recticast {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::size_t step = 0;
    AdamConfig config;
    std::map<std::string, BasicTensor<T>> first_moment;
    std::map<std::string, BasicTensor<T>> second_moment;
};

/// One bias-corrected Adam update of every trainable parameter in `params`.
/// Frozen parameters are skipped and their moments left untouched.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr);

/// Cosine annealing from lr_max at step 0 to lr_min at step == total.
/// Steps past `total` stay at lr_min.
double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min);

}  // namespace recticast
