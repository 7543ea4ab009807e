#pragma once

// Heavy-ball SGD and the warmup + cosine learning-rate schedule.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lpt/common.hpp"
#include "lpt/tensor.hpp"

namespace lpt {

// Named slot in a model; `decay` marks parameters subject to weight decay
// (projection/classifier weight matrices only — never prompts, keys,
// biases or norm affines).
struct ParamRef {
    std::string name;
    Tensor* slot;
    bool decay;
};

using GradMap = std::map<std::string, std::vector<real>>;

struct OptimState {
    std::map<std::string, std::vector<real>> momentum;
    real mu = real(0.9);
    real weight_decay = real(0);
};

// v <- mu*v + (g + wd*theta); theta <- theta - lr*v
inline void sgd_step(const std::vector<ParamRef>& params, const GradMap& grads, OptimState& state,
                     real lr) {
    if (!(lr > real(0))) throw ConfigError("sgd_step: learning rate must be positive");
    for (const ParamRef& p : params) {
        const Tensor& theta = *p.slot;
        auto& v = state.momentum[p.name];
        if (v.empty()) v.assign(theta.numel(), real(0));
        if (v.size() != theta.numel())
            throw ShapeError("sgd_step: momentum buffer for " + p.name + " has " +
                             std::to_string(v.size()) + " elements, parameter has " +
                             std::to_string(theta.numel()));
        static const std::vector<real> kZero;
        auto it = grads.find(p.name);
        const std::vector<real>& g = it == grads.end() ? kZero : it->second;
        if (!g.empty() && g.size() != theta.numel())
            throw ShapeError("sgd_step: gradient for " + p.name + " has wrong size");
        real wd = p.decay ? state.weight_decay : real(0);
        std::vector<real> out(theta.numel());
        for (size_t i = 0; i < out.size(); ++i) {
            real gi = g.empty() ? real(0) : g[i];
            if (!std::isfinite(gi))
                throw NumericError("sgd_step: non-finite gradient in parameter " + p.name);
            v[i] = state.mu * v[i] + (gi + wd * theta.at(i));
            out[i] = theta.at(i) - lr * v[i];
        }
        *p.slot = Tensor::from(theta.shape(), std::move(out));
    }
}

// Schedule value at fractional epoch position t: linear ramp 0 -> base_lr
// over warmup_epochs, then cosine decay to 0 at total_epochs.
inline real lr_at_frac(real t, real base_lr, real warmup_epochs, int total_epochs) {
    if (warmup_epochs >= static_cast<real>(total_epochs))
        throw ConfigError("lr schedule: warmup_epochs must be smaller than total_epochs");
    if (warmup_epochs > real(0) && t < warmup_epochs) return base_lr * t / warmup_epochs;
    real span = static_cast<real>(total_epochs) - warmup_epochs;
    real x = (t - warmup_epochs) / span;
    return base_lr * real(0.5) * (real(1) + std::cos(real(3.14159265358979323846) * x));
}

inline real lr_at(int epoch, int step_in_epoch, int steps_per_epoch, real base_lr,
                  real warmup_epochs, int total_epochs) {
    if (epoch < 0 || epoch >= total_epochs)
        throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(total_epochs) + ")");
    real t = static_cast<real>(epoch) +
             static_cast<real>(step_in_epoch) / static_cast<real>(steps_per_epoch);
    return lr_at_frac(t, base_lr, warmup_epochs, total_epochs);
}

// Base learning rate rule scaled by batch size.
inline real base_lr_for_batch(real rule, int batch) {
    return rule * static_cast<real>(batch) / real(256);
}

}  // namespace lpt
