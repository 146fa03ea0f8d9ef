#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "recticast/autograd.hpp"
#include "recticast/rng.hpp"

namespace recticast::testing {

struct GradCheckResult {
    double max_rel_err = 0;
    double worst_analytic = 0;
    double worst_numeric = 0;
    std::size_t checked = 0;
};

/// Compares reverse-mode gradients of a scalar loss against five-point central
/// finite differences for `probes` randomly chosen coordinates of every input
/// (all coordinates when probes == 0). Relative error is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheckResult grad_check(const std::function<ag::Var<double>()>& loss,
                                  std::vector<ag::Var<double>> inputs, Rng& rng, std::size_t probes = 0,
                                  double h = 1e-5, double floor = 1e-5) {
    for (auto& in : inputs) in.zero_grad();
    auto l = loss();
    l.backward();
    GradCheckResult out;
    for (auto& in : inputs) {
        const auto analytic = in.grad();
        auto& v = in.mutable_value();
        std::vector<std::size_t> coords;
        if (probes == 0 || probes >= v.numel()) {
            for (std::size_t i = 0; i < v.numel(); ++i) coords.push_back(i);
        } else {
            for (std::size_t k = 0; k < probes; ++k) coords.push_back(rng.below(v.numel()));
        }
        for (auto i : coords) {
            const double x0 = v.span()[i];
            auto at = [&](double x) {
                ag::NoGradGuard g;
                v.span()[i] = x;
                return loss().value().span()[0];
            };
            const double numeric =
                (-at(x0 + 2 * h) + 8 * at(x0 + h) - 8 * at(x0 - h) + at(x0 - 2 * h)) / (12 * h);
            v.span()[i] = x0;
            const double a = analytic.span()[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (rel > out.max_rel_err) {
                out.max_rel_err = rel;
                out.worst_analytic = a;
                out.worst_numeric = numeric;
            }
            ++out.checked;
        }
    }
    return out;
}

inline BasicTensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    BasicTensor<double> t = BasicTensor<double>::zeros(shape);
    for (auto& v : t.span()) v = scale * rng.normal();
    return t;
}

/// Random linear functional of an output: mean(out * r), r fixed by the rng.
inline ag::Var<double> project(const ag::Var<double>& out, const BasicTensor<double>& r) {
    return ag::mean(ag::mul(out, ag::constant(r)));
}

}  // namespace recticast::testing
