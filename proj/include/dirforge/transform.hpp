#pragma once

// Spatial transformer: warping, field resampling, composition and patch
// tiling/fusion. Displacements are in voxel units throughout.

#include <array>
#include <vector>

#include "dirforge/dvf.hpp"
#include "dirforge/volume.hpp"

namespace dirforge {

using Index3 = std::array<int, 3>;

// out(p) = vol(p + dvf(p)), trilinear, border-clamped.
Volume warp(const Volume &vol, const DVF &dvf);

// Trilinear (cell-centred) resampling of each channel to `target`, with the
// displacement values scaled by target/source per axis.
DVF upsample_dvf(const DVF &dvf, const Dims &target);

// result(p) = global(p + local(p)) + local(p).
DVF compose(const DVF &global, const DVF &local);

struct PatchGrid {
    Index3 patch_size{};
    Index3 stride{};
    Dims volume_dims{};
    std::vector<Index3> starts;

    [[nodiscard]] std::size_t size() const { return starts.size(); }
};

// Starts at multiples of (patch - overlap) per axis; the final start on an
// axis is clamped to dim - patch so every voxel is covered.
PatchGrid build_patch_grid(const Dims &volume_dims, const Index3 &patch_size, const Index3 &overlap);

// Per-voxel weighted mean of the patch fields with separable linear taper
// weights (1 at the patch centre, 0.05 at the faces). Accumulates in grid
// order.
DVF fuse_patches(const std::vector<DVF> &patch_dvfs, const PatchGrid &grid);

// Taper weight of index i along a patch axis of length n.
double taper_weight(int i, int n);

Volume extract_patch(const Volume &vol, const Index3 &start, const Index3 &size);
DVF extract_patch(const DVF &dvf, const Index3 &start, const Index3 &size);

// Integer per-axis factors so that each pooled dim is <= max_dim.
Index3 pooling_factors(const Dims &dims, int max_dim);
// Block mean over non-overlapping factor^3 cells (trailing partial cells are
// dropped); spacing scales by the factor.
Volume mean_pool(const Volume &vol, const Index3 &factors);

} // namespace dirforge
