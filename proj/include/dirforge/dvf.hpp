#pragma once

#include <span>
#include <vector>

#include "dirforge/volume.hpp"

namespace dirforge {

// Per-voxel displacement (dx, dy, dz) in voxel units, stored channel-major.
//
// Convention: a DVF defined on the target grid points from each target voxel
// to the corresponding location in the moving image, so that
// warp(moving, dvf)(p) = moving(p + dvf(p)).
class DVF {
public:
    DVF() = default;
    explicit DVF(Dims dims);
    DVF(Dims dims, std::vector<float> data);

    [[nodiscard]] const Dims &dims() const { return dims_; }
    [[nodiscard]] std::span<const float> component(int c) const;
    [[nodiscard]] std::span<float> component(int c);
    [[nodiscard]] std::span<const float> data() const { return data_; }
    [[nodiscard]] std::span<float> data() { return data_; }
    [[nodiscard]] Vec3 at(int x, int y, int z) const;

    friend bool operator==(const DVF &, const DVF &) = default;

private:
    Dims dims_{};
    std::vector<float> data_ = std::vector<float>(3, 0.0f);
};

} // namespace dirforge
