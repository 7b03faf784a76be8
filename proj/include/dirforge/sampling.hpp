#pragma once

// Trilinear sampling kernels shared by the transform module and the
// differentiable ops in nn, so training and inference interpolate alike.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dirforge/volume.hpp"

namespace dirforge::sampling {

// One axis of a trilinear stencil: value = lerp(v[i0], v[i1], frac).
// `inside` is false when the coordinate was clamped to the grid edge, in
// which case the sample has no derivative along this axis.
struct AxisStencil {
    int i0 = 0;
    int i1 = 0;
    double frac = 0.0;
    bool inside = true;
};

inline AxisStencil axis_stencil(double coord, int n) {
    AxisStencil s;
    const double hi = static_cast<double>(n - 1);
    double c = coord;
    if (!(c >= 0.0)) {
        c = 0.0;
        s.inside = coord >= 0.0;
    } else if (c > hi) {
        c = hi;
        s.inside = false;
    }
    const double fl = std::floor(c);
    s.i0 = static_cast<int>(fl);
    s.i1 = std::min(s.i0 + 1, n - 1);
    s.frac = c - fl;
    return s;
}

struct Stencil3 {
    AxisStencil ax[3];
};

inline Stencil3 stencil3(const Dims &d, double x, double y, double z) {
    return Stencil3{{axis_stencil(x, d.nx), axis_stencil(y, d.ny), axis_stencil(z, d.nz)}};
}

// lerp that returns `a` untouched at t == 0, keeping integer-coordinate
// samples bit-exact (including the sign of zero).
inline double exact_lerp(double a, double b, double t) { return t == 0.0 ? a : std::lerp(a, b, t); }

// Border-clamped trilinear sample of a scalar grid.
inline double sample(const float *data, const Dims &d, const Stencil3 &s) {
    const auto &sx = s.ax[0];
    const auto &sy = s.ax[1];
    const auto &sz = s.ax[2];
    auto at = [&](int x, int y, int z) { return static_cast<double>(data[d.index(x, y, z)]); };
    const double c00 = exact_lerp(at(sx.i0, sy.i0, sz.i0), at(sx.i1, sy.i0, sz.i0), sx.frac);
    const double c10 = exact_lerp(at(sx.i0, sy.i1, sz.i0), at(sx.i1, sy.i1, sz.i0), sx.frac);
    const double c01 = exact_lerp(at(sx.i0, sy.i0, sz.i1), at(sx.i1, sy.i0, sz.i1), sx.frac);
    const double c11 = exact_lerp(at(sx.i0, sy.i1, sz.i1), at(sx.i1, sy.i1, sz.i1), sx.frac);
    const double c0 = exact_lerp(c00, c10, sy.frac);
    const double c1 = exact_lerp(c01, c11, sy.frac);
    return exact_lerp(c0, c1, sz.frac);
}

inline double sample(const float *data, const Dims &d, double x, double y, double z) {
    return sample(data, d, stencil3(d, x, y, z));
}

// Partial derivatives of the trilinear interpolant w.r.t. the sample
// coordinate. Axes whose coordinate was clamped contribute zero.
inline void sample_gradient(const float *data, const Dims &d, const Stencil3 &s, double grad[3]) {
    const auto &sx = s.ax[0];
    const auto &sy = s.ax[1];
    const auto &sz = s.ax[2];
    auto at = [&](int x, int y, int z) { return static_cast<double>(data[d.index(x, y, z)]); };
    const double v000 = at(sx.i0, sy.i0, sz.i0), v100 = at(sx.i1, sy.i0, sz.i0);
    const double v010 = at(sx.i0, sy.i1, sz.i0), v110 = at(sx.i1, sy.i1, sz.i0);
    const double v001 = at(sx.i0, sy.i0, sz.i1), v101 = at(sx.i1, sy.i0, sz.i1);
    const double v011 = at(sx.i0, sy.i1, sz.i1), v111 = at(sx.i1, sy.i1, sz.i1);
    const double fx = sx.frac, fy = sy.frac, fz = sz.frac;
    const double gx = (1 - fy) * (1 - fz) * (v100 - v000) + fy * (1 - fz) * (v110 - v010) +
                      (1 - fy) * fz * (v101 - v001) + fy * fz * (v111 - v011);
    const double gy = (1 - fx) * (1 - fz) * (v010 - v000) + fx * (1 - fz) * (v110 - v100) +
                      (1 - fx) * fz * (v011 - v001) + fx * fz * (v111 - v101);
    const double gz = (1 - fx) * (1 - fy) * (v001 - v000) + fx * (1 - fy) * (v101 - v100) +
                      (1 - fx) * fy * (v011 - v010) + fx * fy * (v111 - v110);
    // A coordinate sitting exactly on the last index is still a valid
    // one-sided cell only if a neighbour exists.
    grad[0] = (sx.inside && sx.i1 != sx.i0) ? gx : 0.0;
    grad[1] = (sy.inside && sy.i1 != sy.i0) ? gy : 0.0;
    grad[2] = (sz.inside && sz.i1 != sz.i0) ? gz : 0.0;
}

// Scatter `g` into the eight corner cells with trilinear weights (adjoint of
// `sample` w.r.t. the grid values).
inline void scatter(double *grad_data, const Dims &d, const Stencil3 &s, double g) {
    const auto &sx = s.ax[0];
    const auto &sy = s.ax[1];
    const auto &sz = s.ax[2];
    const double wx[2] = {1.0 - sx.frac, sx.frac};
    const double wy[2] = {1.0 - sy.frac, sy.frac};
    const double wz[2] = {1.0 - sz.frac, sz.frac};
    const int ix[2] = {sx.i0, sx.i1};
    const int iy[2] = {sy.i0, sy.i1};
    const int iz[2] = {sz.i0, sz.i1};
    for (int c = 0; c < 8; ++c) {
        const int a = c & 1, b = (c >> 1) & 1, e = (c >> 2) & 1;
        const double w = wx[a] * wy[b] * wz[e];
        if (w != 0.0) {
            grad_data[d.index(ix[a], iy[b], iz[e])] += w * g;
        }
    }
}

// Half-pixel (cell-centred) resampling table from `src` to `dst` samples
// along one axis: dst index i maps to src coordinate (i + 0.5) * src/dst - 0.5.
inline std::vector<AxisStencil> resample_axis(int src, int dst) {
    std::vector<AxisStencil> table(static_cast<std::size_t>(dst));
    const double ratio = static_cast<double>(src) / static_cast<double>(dst);
    for (int i = 0; i < dst; ++i) {
        table[static_cast<std::size_t>(i)] = axis_stencil((i + 0.5) * ratio - 0.5, src);
    }
    return table;
}

} // namespace dirforge::sampling
