#include "dirforge/losses.hpp"

#include <cmath>

#include "dirforge/errors.hpp"

namespace dirforge {

using nlohmann::json;
using nn::Tensor;

void LossWeights::validate() const {
    for (double v : {alpha, beta, gamma, delta, mu1, mu2}) {
        if (!std::isfinite(v) || v < 0.0) {
            throw DataError("loss weights must be finite and >= 0");
        }
    }
}

json LossWeights::to_json() const {
    return {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}, {"delta", delta}, {"mu1", mu1}, {"mu2", mu2}};
}

LossWeights LossWeights::from_json(const json &j) {
    LossWeights w;
    w.alpha = j.value("alpha", w.alpha);
    w.beta = j.value("beta", w.beta);
    w.gamma = j.value("gamma", w.gamma);
    w.delta = j.value("delta", w.delta);
    w.mu1 = j.value("mu1", w.mu1);
    w.mu2 = j.value("mu2", w.mu2);
    w.validate();
    return w;
}

Tensor sim_loss_with_target_mind(const Tensor &deformed, const Tensor &target_mind, double delta,
                                 const nn::MindOptions &mind) {
    const Tensor md = nn::mind(deformed, mind);
    const Tensor one_minus = nn::add(nn::scale(nn::ncc(md, target_mind), -1.0f), Tensor::scalar(1.0f));
    if (delta == 0.0) {
        return one_minus;
    }
    return nn::add(one_minus, nn::scale(nn::gradient_difference(md, target_mind), static_cast<float>(delta)));
}

Tensor sim_loss(const Tensor &deformed, const Tensor &target, double delta, const nn::MindOptions &mind) {
    return sim_loss_with_target_mind(deformed, nn::mind(target, mind), delta, mind);
}

Tensor reg_loss(const Tensor &dvf, double mu1, double mu2) {
    return nn::add(nn::scale(nn::jacobian_rms(dvf), static_cast<float>(mu1)),
                   nn::scale(nn::laplacian_rms(dvf), static_cast<float>(mu2)));
}

Tensor adv_generator_loss(const Tensor &disc_on_deformed) { return nn::bce(disc_on_deformed, 1.0f); }

Tensor adv_discriminator_loss(const Tensor &disc_on_deformed, const Tensor &disc_on_target) {
    return nn::scale(nn::add(nn::bce(disc_on_target, 1.0f), nn::bce(disc_on_deformed, 0.0f)), 0.5f);
}

GeneratorLoss assemble_generator_loss(const Tensor &sim, const Tensor &adv, const Tensor &reg, const LossWeights &w) {
    const Tensor total = nn::add(nn::add(nn::scale(sim, static_cast<float>(w.alpha)), nn::scale(adv, static_cast<float>(w.beta))),
                                 nn::scale(reg, static_cast<float>(w.gamma)));
    return {total, sim, adv, reg};
}

GeneratorLoss total_generator_loss(const Tensor &deformed, const Tensor &target, const Tensor &dvf,
                                   const Tensor &disc_on_deformed, const LossWeights &w) {
    return assemble_generator_loss(sim_loss(deformed, target, w.delta), adv_generator_loss(disc_on_deformed),
                                   reg_loss(dvf, w.mu1, w.mu2), w);
}

} // namespace dirforge
