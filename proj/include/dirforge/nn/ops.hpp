#pragma once

#include <array>

#include "dirforge/nn/tensor.hpp"

namespace dirforge::nn {

struct ConvSpec {
    int in_channels = 1;
    int out_channels = 1;
    std::array<int, 3> kernel{3, 3, 3};
    int stride = 1;
    int padding = 1;

    // Kernel odd per axis, stride >= 1, channels >= 1.
    void validate() const;
    [[nodiscard]] int out_size(int in, int axis) const {
        return (in + 2 * padding - kernel[static_cast<std::size_t>(axis)]) / stride + 1;
    }
};

// Zero-padded cross-correlation. weights: (out, in, kx, ky, kz) stored as
// Shape{out, in, kx, ky, kz}; bias: Shape{1, out} or undefined.
Tensor conv3d(const Tensor &input, const Tensor &weights, const Tensor &bias, const ConvSpec &spec);

// 2x2x2 max pooling; backward routes to the first maximum in scan order.
Tensor maxpool3d(const Tensor &input);

Tensor leaky_relu(const Tensor &t, float slope = 0.2f);
inline Tensor relu(const Tensor &t) { return leaky_relu(t, 0.0f); }
Tensor sigmoid(const Tensor &t);
Tensor tanh(const Tensor &t);

Tensor add(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
// x * gate with gate broadcast over x's channels (gate has one channel).
Tensor mul_channel_broadcast(const Tensor &x, const Tensor &gate);
Tensor scale(const Tensor &t, float s);
Tensor concat_channels(const Tensor &a, const Tensor &b);

Tensor sum(const Tensor &t);
Tensor mean(const Tensor &t);

// Cell-centred trilinear resampling of every channel to `target`; channel c
// is additionally multiplied by channel_scale[c % 3] when `scale_channels`.
Tensor resample_trilinear(const Tensor &t, const Dims &target);
// DVF upsampling: 3 channels, displacement rescaled by target/source per axis.
Tensor upsample_dvf(const Tensor &dvf, const Dims &target);

// Spatial transformer: out(p) = image(p + dvf(p)), border clamped.
// image: (1,1,X,Y,Z), dvf: (1,3,X,Y,Z) in voxel units.
Tensor warp(const Tensor &image, const Tensor &dvf);

struct MindOptions {
    int patch_radius = 1;
    // Offsets; defaults to the 6-neighbourhood.
    std::vector<std::array<int, 3>> offsets{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
};

// Differentiable MIND: (1,1,X,Y,Z) -> (1,K,X,Y,Z). The variance floor's
// dynamic range is treated as a constant in the backward pass.
Tensor mind(const Tensor &image, const MindOptions &opts = {});

// Mean over channels of per-channel Pearson correlation, denominator floored
// at 1e-8. A channel flat in both inputs counts as perfectly correlated.
Tensor ncc(const Tensor &a, const Tensor &b);

// Mean over channels, voxels and axes of squared spatial-gradient
// differences; central differences inside, one-sided at the borders.
Tensor gradient_difference(const Tensor &a, const Tensor &b);

// Root-mean-square of the 9 central-difference Jacobian maps of a
// (1,3,X,Y,Z) field.
Tensor jacobian_rms(const Tensor &dvf);
// Root-mean-square of the 3 per-component Laplacian maps. Border voxels reuse
// the second difference of their inner neighbour so linear fields give zero.
Tensor laplacian_rms(const Tensor &dvf);

// Additive attention gate. g is the coarser gating map; its 1x1x1 projection
// is trilinearly resampled to x's grid.
//   a = sigmoid(psi * relu(wx * x + resample(wg * g) + bias) + psi_bias)
//   out = x * a (a broadcast over x's channels)
struct AttentionGateParams {
    Tensor wx;       // (inter, cx, 1, 1, 1)
    Tensor wg;       // (inter, cg, 1, 1, 1)
    Tensor bias;     // (1, inter)
    Tensor psi;      // (1, inter, 1, 1, 1)
    Tensor psi_bias; // (1, 1)
};
Tensor attention_gate(const Tensor &x, const Tensor &g, const AttentionGateParams &p);

// Mean binary cross-entropy of probabilities `p` against a constant label.
// Throws on values outside [0, 1]; exact 0 and 1 are clamped by 1e-7.
Tensor bce(const Tensor &p, float label);

} // namespace dirforge::nn
