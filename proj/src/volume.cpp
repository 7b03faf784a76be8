#include "dirforge/volume.hpp"

#include <algorithm>
#include <cmath>

#include "dirforge/errors.hpp"

namespace dirforge {

std::string to_string(const Dims &d) {
    return "(" + std::to_string(d.nx) + "," + std::to_string(d.ny) + "," + std::to_string(d.nz) + ")";
}

void validate_spacing(const Vec3 &spacing) {
    for (double s : spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) {
            throw DataError("spacing must be positive and finite");
        }
    }
}

Volume::Volume(Dims dims, Vec3 spacing) : Volume(dims, spacing, std::vector<float>(dims.valid() ? dims.count() : 0)) {}

Volume::Volume(Dims dims, Vec3 spacing, std::vector<float> voxels)
    : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)) {
    if (!dims_.valid()) {
        throw DataError("volume dims must be >= 1, got " + to_string(dims_));
    }
    validate_spacing(spacing_);
    if (voxels_.size() != dims_.count()) {
        throw DataError("voxel count " + std::to_string(voxels_.size()) + " does not match dims " + to_string(dims_));
    }
}

Mask::Mask(Dims dims) : Mask(dims, std::vector<std::uint8_t>(dims.valid() ? dims.count() : 0, 0)) {}

Mask::Mask(Dims dims, std::vector<std::uint8_t> bits) : dims_(dims), bits_(std::move(bits)) {
    if (!dims_.valid()) {
        throw DataError("mask dims must be >= 1, got " + to_string(dims_));
    }
    if (bits_.size() != dims_.count()) {
        throw DataError("mask size does not match dims " + to_string(dims_));
    }
    for (auto &b : bits_) {
        b = b != 0 ? 1 : 0;
    }
}

std::size_t Mask::population() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

Mask threshold_mask(const Volume &vol, double hu_min) {
    Mask m(vol.dims());
    const auto v = vol.voxels();
    for (std::size_t i = 0; i < v.size(); ++i) {
        m.set(i, static_cast<double>(v[i]) > hu_min);
    }
    return m;
}

} // namespace dirforge
