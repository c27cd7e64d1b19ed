#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rged/tensor.hpp"

namespace rged {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Per-parameter moments plus the shared step counter.
struct OptimizerState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    OptimizerState() = default;

    OptimizerState(const std::vector<Tensor>& params, AdamConfig cfg) : config(cfg) {
        for (const Tensor& p : params) {
            first_moment.emplace_back(p.numel(), 0.0);
            second_moment.emplace_back(p.numel(), 0.0);
        }
    }
};

/// One bias-corrected Adam update using the gradients accumulated on each
/// parameter. Parameters without gradients are left untouched but the
/// moments still decay.
inline void adam_step(std::vector<Tensor>& params, OptimizerState& state) {
    if (params.size() != state.first_moment.size()) {
        throw DimensionError("adam_step: parameter count differs from optimizer state");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].numel() != state.first_moment[i].size()) {
            throw DimensionError("adam_step: moment shape differs from parameter " + std::to_string(i));
        }
    }
    const AdamConfig& c = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.has_grad()) continue;
        auto data = p.mutable_data();
        const auto grad = p.grad();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = grad[k];
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            data[k] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
        }
    }
}

/// Owns a parameter list and its Adam state.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig config = {})
        : params_(std::move(params)), state_(params_, config) {}

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    void step() { adam_step(params_, state_); }

    const OptimizerState& state() const { return state_; }
    std::vector<Tensor>& params() { return params_; }

private:
    std::vector<Tensor> params_;
    OptimizerState state_;
};

} // namespace rged
