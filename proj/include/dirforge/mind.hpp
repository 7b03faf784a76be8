#pragma once

// Reference (non-differentiable) MIND descriptor. Training uses the graph
// version in nn; this one is the straightforward per-voxel definition.

#include <array>
#include <vector>

#include "dirforge/volume.hpp"

namespace dirforge {

using Offset3 = std::array<int, 3>;

// Unit offsets along +-x, +-y, +-z.
std::vector<Offset3> six_neighbourhood();

struct MindDescriptor {
    Dims dims{};
    std::vector<Offset3> neighbourhood;
    // Channel-major, x-fastest within a channel.
    std::vector<float> values;

    [[nodiscard]] int channels() const { return static_cast<int>(neighbourhood.size()); }
    [[nodiscard]] float at(int k, int x, int y, int z) const {
        return values[static_cast<std::size_t>(k) * dims.count() + dims.index(x, y, z)];
    }
};

// For each voxel p and offset r: exp(-D_r(p) / V(p)) normalised so the
// largest channel is 1, where D_r is the mean squared difference between the
// box patches around p and p + r (edge clamped) and V is the mean of D_r over
// the offsets, floored at 1e-6 * (max - min)^2.
MindDescriptor compute_mind(const Volume &vol, int patch_radius = 1,
                            const std::vector<Offset3> &neighbourhood = six_neighbourhood());

} // namespace dirforge
