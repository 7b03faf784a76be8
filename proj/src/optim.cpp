#include "dirforge/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dirforge {

namespace {

double adam_delta(double &m, double &v, double g, long step, const AdamConfig &cfg) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
    return cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
}

} // namespace

void adam_step(nn::ParamSet &params, AdamState &state, const AdamConfig &cfg) {
    auto &entries = params.entries();
    if (state.m.empty() && state.step == 0) {
        for (const auto &e : entries) {
            state.m.emplace_back(e.tensor.shape().numel(), 0.0);
            state.v.emplace_back(e.tensor.shape().numel(), 0.0);
        }
    }
    if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
        throw std::invalid_argument("adam_step: optimizer state does not match the parameter set");
    }
    for (std::size_t t = 0; t < entries.size(); ++t) {
        if (state.m[t].size() != entries[t].tensor.shape().numel()) {
            throw std::invalid_argument("adam_step: shape mismatch for " + entries[t].name);
        }
    }
    ++state.step;
    for (std::size_t t = 0; t < entries.size(); ++t) {
        auto &tensor = entries[t].tensor;
        const auto grad = tensor.grad();
        auto values = tensor.mutable_values();
        auto &m = state.m[t];
        auto &v = state.v[t];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            if (g == 0.0 && m[i] == 0.0 && v[i] == 0.0) {
                continue;
            }
            values[i] = static_cast<float>(values[i] - adam_delta(m[i], v[i], g, state.step, cfg));
        }
    }
}

double ScalarAdam::update(double param, double grad, const AdamConfig &cfg) {
    ++step;
    return param - adam_delta(m, v, grad, step, cfg);
}

} // namespace dirforge
