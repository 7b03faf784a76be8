#pragma once

// Training objectives on the autodiff graph.

#include "dirforge/nn/ops.hpp"
#include "json.hpp"

namespace dirforge {

struct LossWeights {
    double alpha = 200.0; // similarity
    double beta = 1.0;    // adversarial
    double gamma = 10.0;  // regularisation
    double delta = 5.0;   // gradient difference inside the similarity term
    double mu1 = 1.0;     // first derivatives of the field
    double mu2 = 0.5;     // second derivatives of the field

    // Throws DataError on negative or non-finite weights.
    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json &j);
    friend bool operator==(const LossWeights &, const LossWeights &) = default;
};

// [1 - ncc(mind(a), mind(b))] + delta * gd(mind(a), mind(b)); inputs in HU.
nn::Tensor sim_loss(const nn::Tensor &deformed, const nn::Tensor &target, double delta,
                    const nn::MindOptions &mind = {});
// Same, with the target descriptor precomputed (it carries no gradient).
nn::Tensor sim_loss_with_target_mind(const nn::Tensor &deformed, const nn::Tensor &target_mind, double delta,
                                     const nn::MindOptions &mind = {});

// mu1 * rms(Jacobian maps) + mu2 * rms(Laplacian maps).
nn::Tensor reg_loss(const nn::Tensor &dvf, double mu1, double mu2);

// Non-saturating generator term: BCE(D(deformed), 1).
nn::Tensor adv_generator_loss(const nn::Tensor &disc_on_deformed);
// 0.5 * [BCE(D(target), 1) + BCE(D(deformed), 0)].
nn::Tensor adv_discriminator_loss(const nn::Tensor &disc_on_deformed, const nn::Tensor &disc_on_target);

struct GeneratorLoss {
    nn::Tensor total;
    nn::Tensor sim;
    nn::Tensor adv;
    nn::Tensor reg;
};

// alpha * sim + beta * adv + gamma * reg.
GeneratorLoss total_generator_loss(const nn::Tensor &deformed, const nn::Tensor &target, const nn::Tensor &dvf,
                                   const nn::Tensor &disc_on_deformed, const LossWeights &w);
GeneratorLoss assemble_generator_loss(const nn::Tensor &sim, const nn::Tensor &adv, const nn::Tensor &reg,
                                      const LossWeights &w);

} // namespace dirforge
