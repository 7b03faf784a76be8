#pragma once

#include <vector>

#include "dirforge/nn/checkpoint.hpp"

namespace dirforge {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First and second moments per parameter tensor, plus the step count.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;
};

// One bias-corrected Adam update of every tensor in `params` from its
// accumulated gradient. A tensor without a gradient is treated as zero grad.
// Throws std::invalid_argument when state and params disagree in layout.
void adam_step(nn::ParamSet &params, AdamState &state, const AdamConfig &cfg);

// Scalar form of the same update, for a single value.
struct ScalarAdam {
    double m = 0.0;
    double v = 0.0;
    long step = 0;
    double update(double param, double grad, const AdamConfig &cfg);
};

} // namespace dirforge
