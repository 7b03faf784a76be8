#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dirforge {

using Vec3 = std::array<double, 3>;

// Voxel counts of a 3D grid. Linear index is x-fastest, then y, then z.
struct Dims {
    int nx = 1;
    int ny = 1;
    int nz = 1;

    [[nodiscard]] std::size_t count() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
    }
    [[nodiscard]] std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * static_cast<std::size_t>(ny) + static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(nx) +
               static_cast<std::size_t>(x);
    }
    [[nodiscard]] int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    [[nodiscard]] bool valid() const { return nx >= 1 && ny >= 1 && nz >= 1; }

    friend bool operator==(const Dims &, const Dims &) = default;
};

std::string to_string(const Dims &d);

// Scalar HU grid with physical spacing (mm per voxel).
class Volume {
public:
    Volume() = default;
    // Zero-filled volume.
    Volume(Dims dims, Vec3 spacing);
    Volume(Dims dims, Vec3 spacing, std::vector<float> voxels);

    [[nodiscard]] const Dims &dims() const { return dims_; }
    [[nodiscard]] const Vec3 &spacing() const { return spacing_; }
    [[nodiscard]] std::span<const float> voxels() const { return voxels_; }
    [[nodiscard]] std::span<float> voxels() { return voxels_; }
    [[nodiscard]] float at(int x, int y, int z) const { return voxels_[dims_.index(x, y, z)]; }
    float &at(int x, int y, int z) { return voxels_[dims_.index(x, y, z)]; }

    friend bool operator==(const Volume &, const Volume &) = default;

private:
    Dims dims_{};
    Vec3 spacing_{1.0, 1.0, 1.0};
    std::vector<float> voxels_{0.0f};
};

// One flag per voxel of a source grid.
class Mask {
public:
    Mask() = default;
    explicit Mask(Dims dims);
    Mask(Dims dims, std::vector<std::uint8_t> bits);

    [[nodiscard]] const Dims &dims() const { return dims_; }
    [[nodiscard]] std::span<const std::uint8_t> bits() const { return bits_; }
    [[nodiscard]] bool test(std::size_t i) const { return bits_[i] != 0; }
    void set(std::size_t i, bool on) { bits_[i] = on ? 1 : 0; }
    [[nodiscard]] std::size_t population() const;

    friend bool operator==(const Mask &, const Mask &) = default;

private:
    Dims dims_{};
    std::vector<std::uint8_t> bits_{0};
};

// Set exactly where the voxel value is strictly greater than hu_min.
Mask threshold_mask(const Volume &vol, double hu_min);

inline constexpr double kBodyThresholdHu = -300.0;
inline constexpr double kBoneThresholdHu = 300.0;

void validate_spacing(const Vec3 &spacing);

} // namespace dirforge
