#include <stdexcept>

#include "dirforge/nn/ops.hpp"

namespace dirforge::nn {

Tensor attention_gate(const Tensor &x, const Tensor &g, const AttentionGateParams &p) {
    const Shape &ws = p.wx.shape();
    const Shape &gs = p.wg.shape();
    const int inter = ws.n;
    if (ws.c != x.shape().c || gs.c != g.shape().c || gs.n != inter || p.psi.shape().c != inter ||
        p.psi.shape().n != 1) {
        throw std::invalid_argument("attention_gate: channel mismatch between inputs and parameters");
    }
    ConvSpec px{x.shape().c, inter, {1, 1, 1}, 1, 0};
    ConvSpec pg{g.shape().c, inter, {1, 1, 1}, 1, 0};
    ConvSpec pp{inter, 1, {1, 1, 1}, 1, 0};
    const Tensor theta = conv3d(x, p.wx, p.bias, px);
    Tensor phi = conv3d(g, p.wg, Tensor{}, pg);
    if (!(phi.shape().dims() == x.shape().dims())) {
        phi = resample_trilinear(phi, x.shape().dims());
    }
    const Tensor a = sigmoid(conv3d(relu(add(theta, phi)), p.psi, p.psi_bias, pp));
    return mul_channel_broadcast(x, a);
}

} // namespace dirforge::nn
