// Differentiable spatial ops: resampling, warping, MIND and the
// image/field losses built on finite-difference stencils.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dirforge/nn/ops.hpp"
#include "dirforge/sampling.hpp"

namespace dirforge::nn {

namespace {

struct Tables {
    std::vector<sampling::AxisStencil> x, y, z;
};

Tensor resample_impl(const Tensor &t, const Dims &target, bool dvf_scaling) {
    const Shape &s = t.shape();
    if (!target.valid()) {
        throw std::invalid_argument("resample: invalid target dims");
    }
    if (dvf_scaling && s.c != 3) {
        throw std::invalid_argument("upsample_dvf: expected 3 channels, got " + std::to_string(s.c));
    }
    const Dims src = s.dims();
    const Shape os{s.n, s.c, target.nx, target.ny, target.nz};
    Tensor out = make_result(os, {&t});
    Tables tab{sampling::resample_axis(src.nx, target.nx), sampling::resample_axis(src.ny, target.ny),
               sampling::resample_axis(src.nz, target.nz)};
    const double ratio[3] = {static_cast<double>(target.nx) / src.nx, static_cast<double>(target.ny) / src.ny,
                             static_cast<double>(target.nz) / src.nz};
    auto o = out.mutable_values();
    const std::size_t in_sp = s.spatial();
    const std::size_t out_sp = os.spatial();
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const double k = dvf_scaling ? ratio[nc % 3] : 1.0;
        const float *in = t.values().data() + nc * in_sp;
        float *dst = o.data() + nc * out_sp;
        for (int z = 0; z < target.nz; ++z) {
            for (int y = 0; y < target.ny; ++y) {
                for (int x = 0; x < target.nx; ++x) {
                    const sampling::Stencil3 st{{tab.x[x], tab.y[y], tab.z[z]}};
                    const double v = sampling::sample(in, src, st);
                    dst[target.index(x, y, z)] = static_cast<float>(dvf_scaling ? v * k : v);
                }
            }
        }
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *tn = t.node().get();
        on->backward_fn = [on, tn, tab = std::move(tab), src, target, s, dvf_scaling, r0 = ratio[0], r1 = ratio[1],
                           r2 = ratio[2]] {
            const double ratio[3] = {r0, r1, r2};
            const std::size_t in_sp = s.spatial();
            const std::size_t out_sp = target.count();
            auto &g = tn->grad_buffer();
            std::vector<double> acc(in_sp);
            for (int nc = 0; nc < s.n * s.c; ++nc) {
                const double k = dvf_scaling ? ratio[nc % 3] : 1.0;
                std::fill(acc.begin(), acc.end(), 0.0);
                const float *go = on->grad.data() + nc * out_sp;
                for (int z = 0; z < target.nz; ++z) {
                    for (int y = 0; y < target.ny; ++y) {
                        for (int x = 0; x < target.nx; ++x) {
                            const sampling::Stencil3 st{{tab.x[x], tab.y[y], tab.z[z]}};
                            sampling::scatter(acc.data(), src, st, k * go[target.index(x, y, z)]);
                        }
                    }
                }
                float *gi = g.data() + nc * in_sp;
                for (std::size_t i = 0; i < in_sp; ++i) {
                    gi[i] += static_cast<float>(acc[i]);
                }
            }
        };
    }
    return out;
}

// Calls f(offset, coefficient) for the first-derivative stencil at index i of
// an axis of length n: central inside, one-sided at the ends.
template <class F>
void first_derivative_terms(int n, int i, F &&f) {
    if (n < 2) {
        return;
    }
    if (i == 0) {
        f(1, 1.0);
        f(0, -1.0);
    } else if (i == n - 1) {
        f(0, 1.0);
        f(-1, -1.0);
    } else {
        f(1, 0.5);
        f(-1, -0.5);
    }
}

// Second difference; ends reuse the stencil of their inner neighbour.
template <class F>
void second_derivative_terms(int n, int i, F &&f) {
    if (n < 3) {
        return;
    }
    const int c = std::clamp(i, 1, n - 2) - i;
    f(c - 1, 1.0);
    f(c, -2.0);
    f(c + 1, 1.0);
}

struct AxisWalk {
    int n;
    std::ptrdiff_t stride;
};

inline AxisWalk axis_walk(const Dims &d, int axis) {
    if (axis == 0) {
        return {d.nx, 1};
    }
    if (axis == 1) {
        return {d.ny, d.nx};
    }
    return {d.nz, static_cast<std::ptrdiff_t>(d.nx) * d.ny};
}

inline int axis_coord(const Dims &d, std::size_t idx, int axis) {
    if (axis == 0) {
        return static_cast<int>(idx % static_cast<std::size_t>(d.nx));
    }
    if (axis == 1) {
        return static_cast<int>((idx / static_cast<std::size_t>(d.nx)) % static_cast<std::size_t>(d.ny));
    }
    return static_cast<int>(idx / (static_cast<std::size_t>(d.nx) * d.ny));
}

// out = D_axis f for one channel, with D given by `terms`.
template <bool Second>
void apply_stencil(const Dims &d, int axis, const double *f, double *out) {
    const AxisWalk w = axis_walk(d, axis);
    const std::size_t n = d.count();
    for (std::size_t idx = 0; idx < n; ++idx) {
        const int i = axis_coord(d, idx, axis);
        double s = 0.0;
        auto acc = [&](int off, double coef) { s += coef * f[static_cast<std::ptrdiff_t>(idx) + off * w.stride]; };
        if constexpr (Second) {
            second_derivative_terms(w.n, i, acc);
        } else {
            first_derivative_terms(w.n, i, acc);
        }
        out[idx] = s;
    }
}

// grad_f += D_axis^T g.
template <bool Second>
void apply_stencil_adjoint(const Dims &d, int axis, const double *g, double *grad_f) {
    const AxisWalk w = axis_walk(d, axis);
    const std::size_t n = d.count();
    for (std::size_t idx = 0; idx < n; ++idx) {
        const int i = axis_coord(d, idx, axis);
        const double gi = g[idx];
        auto acc = [&](int off, double coef) { grad_f[static_cast<std::ptrdiff_t>(idx) + off * w.stride] += coef * gi; };
        if constexpr (Second) {
            second_derivative_terms(w.n, i, acc);
        } else {
            first_derivative_terms(w.n, i, acc);
        }
    }
}

std::vector<double> channel_as_double(const Tensor &t, std::size_t nc) {
    const std::size_t sp = t.shape().spatial();
    const float *p = t.values().data() + nc * sp;
    return std::vector<double>(p, p + sp);
}

} // namespace

Tensor resample_trilinear(const Tensor &t, const Dims &target) { return resample_impl(t, target, false); }

Tensor upsample_dvf(const Tensor &dvf, const Dims &target) {
    const Dims src = dvf.shape().dims();
    if (target.nx < src.nx || target.ny < src.ny || target.nz < src.nz) {
        throw std::invalid_argument("upsample_dvf: downsampling requested");
    }
    return resample_impl(dvf, target, true);
}

Tensor warp(const Tensor &image, const Tensor &dvf) {
    const Shape &is = image.shape();
    const Shape &ds = dvf.shape();
    if (is.n != 1 || is.c != 1 || ds.n != 1 || ds.c != 3 || is.dims() != ds.dims()) {
        throw std::invalid_argument("warp: need image (1,1,X,Y,Z) and dvf (1,3,X,Y,Z), got " + to_string(is) + " and " +
                                    to_string(ds));
    }
    const Dims d = is.dims();
    const std::size_t n = d.count();
    Tensor out = make_result(is, {&image, &dvf});
    auto o = out.mutable_values();
    const float *img = image.values().data();
    const float *u = dvf.values().data();
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                const std::size_t i = d.index(x, y, z);
                o[i] = static_cast<float>(sampling::sample(img, d, x + static_cast<double>(u[i]),
                                                           y + static_cast<double>(u[n + i]),
                                                           z + static_cast<double>(u[2 * n + i])));
            }
        }
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *in = image.node().get();
        Node *un = dvf.node().get();
        on->backward_fn = [on, in, un, d, n] {
            const float *img = in->value.data();
            const float *u = un->value.data();
            float *gu = un->requires_grad ? un->grad_buffer().data() : nullptr;
            std::vector<double> gimg(in->requires_grad ? n : 0, 0.0);
            for (int z = 0; z < d.nz; ++z) {
                for (int y = 0; y < d.ny; ++y) {
                    for (int x = 0; x < d.nx; ++x) {
                        const std::size_t i = d.index(x, y, z);
                        const double go = on->grad[i];
                        if (go == 0.0) {
                            continue;
                        }
                        const auto st = sampling::stencil3(d, x + static_cast<double>(u[i]), y + static_cast<double>(u[n + i]),
                                                           z + static_cast<double>(u[2 * n + i]));
                        if (gu != nullptr) {
                            double grad[3];
                            sampling::sample_gradient(img, d, st, grad);
                            gu[i] += static_cast<float>(go * grad[0]);
                            gu[n + i] += static_cast<float>(go * grad[1]);
                            gu[2 * n + i] += static_cast<float>(go * grad[2]);
                        }
                        if (!gimg.empty()) {
                            sampling::scatter(gimg.data(), d, st, go);
                        }
                    }
                }
            }
            if (!gimg.empty()) {
                auto &g = in->grad_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    g[i] += static_cast<float>(gimg[i]);
                }
            }
        };
    }
    return out;
}

Tensor mind(const Tensor &image, const MindOptions &opts) {
    const Shape &is = image.shape();
    if (is.n != 1 || is.c != 1) {
        throw std::invalid_argument("mind: expected a single-channel image, got " + to_string(is));
    }
    if (opts.patch_radius < 1) {
        throw std::invalid_argument("mind: patch_radius must be >= 1");
    }
    if (opts.offsets.empty()) {
        throw std::invalid_argument("mind: neighbourhood must be nonempty");
    }
    const Dims d = is.dims();
    for (const auto &r : opts.offsets) {
        for (int a = 0; a < 3; ++a) {
            if (std::abs(r[static_cast<std::size_t>(a)]) >= d[a]) {
                throw std::invalid_argument("mind: neighbourhood offset exceeds volume dims");
            }
        }
    }
    const int R = opts.patch_radius;
    const int K = static_cast<int>(opts.offsets.size());
    const std::size_t n = d.count();
    const double inv_patch = 1.0 / std::pow(2.0 * R + 1.0, 3.0);
    const float *I = image.values().data();

    // Extended grid holds the squared differences for every position a patch
    // can touch: y in [-R, n-1+R] per axis.
    const Dims e{d.nx + 2 * R, d.ny + 2 * R, d.nz + 2 * R};
    auto clamp_idx = [&](int x, int y, int z) {
        return d.index(std::clamp(x, 0, d.nx - 1), std::clamp(y, 0, d.ny - 1), std::clamp(z, 0, d.nz - 1));
    };

    // Box sum over the (2R+1)^3 window: extended grid -> image grid.
    auto box_valid = [&](const std::vector<double> &ext, std::vector<double> &out) {
        std::vector<double> tx(static_cast<std::size_t>(d.nx) * e.ny * e.nz);
        for (int z = 0; z < e.nz; ++z)
            for (int y = 0; y < e.ny; ++y)
                for (int x = 0; x < d.nx; ++x) {
                    double s = 0.0;
                    for (int k = 0; k <= 2 * R; ++k) s += ext[e.index(x + k, y, z)];
                    tx[(static_cast<std::size_t>(z) * e.ny + y) * d.nx + x] = s;
                }
        std::vector<double> ty(n / d.nz * e.nz);
        for (int z = 0; z < e.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x) {
                    double s = 0.0;
                    for (int k = 0; k <= 2 * R; ++k) s += tx[(static_cast<std::size_t>(z) * e.ny + y + k) * d.nx + x];
                    ty[(static_cast<std::size_t>(z) * d.ny + y) * d.nx + x] = s;
                }
        out.assign(n, 0.0);
        for (int z = 0; z < d.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x) {
                    double s = 0.0;
                    for (int k = 0; k <= 2 * R; ++k) s += ty[(static_cast<std::size_t>(z + k) * d.ny + y) * d.nx + x];
                    out[d.index(x, y, z)] = s * inv_patch;
                }
    };

    std::vector<double> D(static_cast<std::size_t>(K) * n);
    std::vector<double> ext(e.count());
    std::vector<double> tmp;
    for (int k = 0; k < K; ++k) {
        const auto &r = opts.offsets[static_cast<std::size_t>(k)];
        for (int z = 0; z < e.nz; ++z)
            for (int y = 0; y < e.ny; ++y)
                for (int x = 0; x < e.nx; ++x) {
                    const int px = x - R, py = y - R, pz = z - R;
                    const double diff = static_cast<double>(I[clamp_idx(px, py, pz)]) -
                                        static_cast<double>(I[clamp_idx(px + r[0], py + r[1], pz + r[2])]);
                    ext[e.index(x, y, z)] = diff * diff;
                }
        box_valid(ext, tmp);
        std::copy(tmp.begin(), tmp.end(), D.begin() + static_cast<std::ptrdiff_t>(k) * static_cast<std::ptrdiff_t>(n));
    }

    const auto [mn, mx] = std::minmax_element(image.values().begin(), image.values().end());
    const double range = static_cast<double>(*mx) - static_cast<double>(*mn);
    const double eps = 1e-6 * range * range;

    std::vector<double> V(n);
    std::vector<int> argmin(n);
    std::vector<std::uint8_t> floored(n);
    Tensor out = make_result(Shape{1, K, d.nx, d.ny, d.nz}, {&image});
    auto o = out.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0;
        int am = 0;
        for (int k = 0; k < K; ++k) {
            const double v = D[k * n + i];
            m += v;
            if (v < D[am * n + i]) {
                am = k;
            }
        }
        m /= K;
        floored[i] = m < eps ? 1 : 0;
        V[i] = std::max(m, eps);
        argmin[i] = am;
        const double dmin = D[am * n + i];
        for (int k = 0; k < K; ++k) {
            const double ratio = V[i] > 0.0 ? (D[k * n + i] - dmin) / V[i] : 0.0;
            o[k * n + i] = static_cast<float>(std::exp(-ratio));
        }
    }

    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *in = image.node().get();
        on->backward_fn = [on, in, d, e, R, K, n, inv_patch, offsets = opts.offsets, D = std::move(D),
                           V = std::move(V), argmin = std::move(argmin), floored = std::move(floored)] {
            // dL/dD_k per voxel.
            std::vector<double> gD(static_cast<std::size_t>(K) * n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                if (V[i] <= 0.0) {
                    continue;
                }
                const int am = argmin[i];
                const double dmin = D[am * n + i];
                double gV = 0.0;
                double gmin = 0.0;
                for (int k = 0; k < K; ++k) {
                    const double y = on->value[k * n + i];
                    const double g = on->grad[k * n + i] * y;
                    gD[k * n + i] -= g / V[i];
                    gmin += g / V[i];
                    gV += g * (D[k * n + i] - dmin) / (V[i] * V[i]);
                }
                gD[am * n + i] += gmin;
                if (!floored[i]) {
                    for (int k = 0; k < K; ++k) {
                        gD[k * n + i] += gV / K;
                    }
                }
            }
            const float *I = in->value.data();
            auto &gI = in->grad_buffer();
            std::vector<double> gacc(n, 0.0);
            auto clamp_idx = [&](int x, int y, int z) {
                return d.index(std::clamp(x, 0, d.nx - 1), std::clamp(y, 0, d.ny - 1), std::clamp(z, 0, d.nz - 1));
            };
            std::vector<double> ext(e.count());
            for (int k = 0; k < K; ++k) {
                // Adjoint of the valid box sum: spread each voxel's gradient over
                // the extended positions its window covers.
                std::fill(ext.begin(), ext.end(), 0.0);
                const double *g = gD.data() + static_cast<std::size_t>(k) * n;
                std::vector<double> tz(static_cast<std::size_t>(d.nx) * d.ny * e.nz, 0.0);
                for (int z = 0; z < d.nz; ++z)
                    for (int y = 0; y < d.ny; ++y)
                        for (int x = 0; x < d.nx; ++x) {
                            const double v = g[d.index(x, y, z)] * inv_patch;
                            for (int t = 0; t <= 2 * R; ++t) tz[(static_cast<std::size_t>(z + t) * d.ny + y) * d.nx + x] += v;
                        }
                std::vector<double> ty(static_cast<std::size_t>(d.nx) * e.ny * e.nz, 0.0);
                for (int z = 0; z < e.nz; ++z)
                    for (int y = 0; y < d.ny; ++y)
                        for (int x = 0; x < d.nx; ++x) {
                            const double v = tz[(static_cast<std::size_t>(z) * d.ny + y) * d.nx + x];
                            for (int t = 0; t <= 2 * R; ++t) ty[(static_cast<std::size_t>(z) * e.ny + y + t) * d.nx + x] += v;
                        }
                for (int z = 0; z < e.nz; ++z)
                    for (int y = 0; y < e.ny; ++y)
                        for (int x = 0; x < d.nx; ++x) {
                            const double v = ty[(static_cast<std::size_t>(z) * e.ny + y) * d.nx + x];
                            for (int t = 0; t <= 2 * R; ++t) ext[e.index(x + t, y, z)] += v;
                        }
                const auto &r = offsets[static_cast<std::size_t>(k)];
                for (int z = 0; z < e.nz; ++z)
                    for (int y = 0; y < e.ny; ++y)
                        for (int x = 0; x < e.nx; ++x) {
                            const double gs = ext[e.index(x, y, z)];
                            if (gs == 0.0) {
                                continue;
                            }
                            const int px = x - R, py = y - R, pz = z - R;
                            const std::size_t a = clamp_idx(px, py, pz);
                            const std::size_t b = clamp_idx(px + r[0], py + r[1], pz + r[2]);
                            const double diff = static_cast<double>(I[a]) - static_cast<double>(I[b]);
                            gacc[a] += 2.0 * diff * gs;
                            gacc[b] -= 2.0 * diff * gs;
                        }
            }
            for (std::size_t i = 0; i < n; ++i) {
                gI[i] += static_cast<float>(gacc[i]);
            }
        };
    }
    return out;
}

Tensor ncc(const Tensor &a, const Tensor &b) {
    if (!(a.shape() == b.shape())) {
        throw std::invalid_argument("ncc: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    constexpr double kEps = 1e-8;
    const Shape &s = a.shape();
    const int C = s.n * s.c;
    const std::size_t sp = s.spatial();
    struct Stats {
        double ma, mb, saa, sbb, sab, den, r;
        bool flat;
    };
    std::vector<Stats> st(static_cast<std::size_t>(C));
    double total = 0.0;
    for (int c = 0; c < C; ++c) {
        const float *pa = a.values().data() + c * sp;
        const float *pb = b.values().data() + c * sp;
        double ma = 0.0, mb = 0.0;
        for (std::size_t i = 0; i < sp; ++i) {
            ma += pa[i];
            mb += pb[i];
        }
        ma /= static_cast<double>(sp);
        mb /= static_cast<double>(sp);
        double saa = 0.0, sbb = 0.0, sab = 0.0;
        for (std::size_t i = 0; i < sp; ++i) {
            const double da = pa[i] - ma;
            const double db = pb[i] - mb;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
        Stats &t = st[static_cast<std::size_t>(c)];
        t = Stats{ma, mb, saa, sbb, sab, std::max(std::sqrt(saa * sbb), kEps), 0.0, saa == 0.0 && sbb == 0.0};
        t.r = t.flat ? 1.0 : sab / t.den;
        total += t.r;
    }
    Tensor out = make_result(Shape{}, {&a, &b});
    out.mutable_values()[0] = static_cast<float>(total / C);
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *an = a.node().get();
        Node *bn = b.node().get();
        on->backward_fn = [on, an, bn, st = std::move(st), C, sp] {
            const double go = on->grad[0] / C;
            for (int c = 0; c < C; ++c) {
                const Stats &t = st[static_cast<std::size_t>(c)];
                if (t.flat) {
                    continue;
                }
                const bool clamped = std::sqrt(t.saa * t.sbb) < t.den;
                const float *pa = an->value.data() + c * sp;
                const float *pb = bn->value.data() + c * sp;
                if (an->requires_grad) {
                    float *g = an->grad_buffer().data() + c * sp;
                    for (std::size_t i = 0; i < sp; ++i) {
                        const double da = pa[i] - t.ma, db = pb[i] - t.mb;
                        const double d = clamped ? db / t.den : db / t.den - t.r * da / t.saa;
                        g[i] += static_cast<float>(go * d);
                    }
                }
                if (bn->requires_grad) {
                    float *g = bn->grad_buffer().data() + c * sp;
                    for (std::size_t i = 0; i < sp; ++i) {
                        const double da = pa[i] - t.ma, db = pb[i] - t.mb;
                        const double d = clamped ? da / t.den : da / t.den - t.r * db / t.sbb;
                        g[i] += static_cast<float>(go * d);
                    }
                }
            }
        };
    }
    return out;
}

Tensor gradient_difference(const Tensor &a, const Tensor &b) {
    if (!(a.shape() == b.shape())) {
        throw std::invalid_argument("gd: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    const Shape &s = a.shape();
    const Dims d = s.dims();
    const int C = s.n * s.c;
    const std::size_t sp = s.spatial();
    const double norm = 3.0 * C * static_cast<double>(sp);
    std::vector<double> diff(sp), deriv(sp);
    double total = 0.0;
    for (int c = 0; c < C; ++c) {
        const float *pa = a.values().data() + c * sp;
        const float *pb = b.values().data() + c * sp;
        for (std::size_t i = 0; i < sp; ++i) {
            diff[i] = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
        }
        for (int axis = 0; axis < 3; ++axis) {
            apply_stencil<false>(d, axis, diff.data(), deriv.data());
            for (double v : deriv) {
                total += v * v;
            }
        }
    }
    Tensor out = make_result(Shape{}, {&a, &b});
    out.mutable_values()[0] = static_cast<float>(total / norm);
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *an = a.node().get();
        Node *bn = b.node().get();
        on->backward_fn = [on, an, bn, d, C, sp, norm] {
            std::vector<double> diff(sp), deriv(sp), gdiff(sp);
            const double go = on->grad[0];
            for (int c = 0; c < C; ++c) {
                const float *pa = an->value.data() + c * sp;
                const float *pb = bn->value.data() + c * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    diff[i] = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
                }
                std::fill(gdiff.begin(), gdiff.end(), 0.0);
                for (int axis = 0; axis < 3; ++axis) {
                    apply_stencil<false>(d, axis, diff.data(), deriv.data());
                    for (auto &v : deriv) {
                        v *= 2.0 * go / norm;
                    }
                    apply_stencil_adjoint<false>(d, axis, deriv.data(), gdiff.data());
                }
                if (an->requires_grad) {
                    float *g = an->grad_buffer().data() + c * sp;
                    for (std::size_t i = 0; i < sp; ++i) g[i] += static_cast<float>(gdiff[i]);
                }
                if (bn->requires_grad) {
                    float *g = bn->grad_buffer().data() + c * sp;
                    for (std::size_t i = 0; i < sp; ++i) g[i] -= static_cast<float>(gdiff[i]);
                }
            }
        };
    }
    return out;
}

namespace {

// RMS over `maps` stencil outputs per component; first or second order.
template <bool Second>
Tensor field_derivative_rms(const Tensor &dvf, const char *name) {
    const Shape &s = dvf.shape();
    if (s.n != 1 || s.c != 3) {
        throw std::invalid_argument(std::string(name) + ": expected a (1,3,X,Y,Z) field, got " + to_string(s));
    }
    const Dims d = s.dims();
    const std::size_t sp = s.spatial();
    const double maps = Second ? 3.0 : 9.0;
    const double norm = maps * static_cast<double>(sp);
    std::vector<double> deriv(sp), lap(sp);
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const auto f = channel_as_double(dvf, static_cast<std::size_t>(c));
        if constexpr (Second) {
            std::fill(lap.begin(), lap.end(), 0.0);
            for (int axis = 0; axis < 3; ++axis) {
                apply_stencil<true>(d, axis, f.data(), deriv.data());
                for (std::size_t i = 0; i < sp; ++i) lap[i] += deriv[i];
            }
            for (double v : lap) total += v * v;
        } else {
            for (int axis = 0; axis < 3; ++axis) {
                apply_stencil<false>(d, axis, f.data(), deriv.data());
                for (double v : deriv) total += v * v;
            }
        }
    }
    const double rms = std::sqrt(total / norm);
    Tensor out = make_result(Shape{}, {&dvf});
    out.mutable_values()[0] = static_cast<float>(rms);
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *un = dvf.node().get();
        on->backward_fn = [on, un, d, sp, norm, rms] {
            if (rms == 0.0) {
                return;
            }
            const double k = on->grad[0] / (norm * rms);
            std::vector<double> f(sp), deriv(sp), lap(sp), gf(sp);
            auto &g = un->grad_buffer();
            for (int c = 0; c < 3; ++c) {
                const float *src = un->value.data() + c * sp;
                std::copy(src, src + sp, f.begin());
                std::fill(gf.begin(), gf.end(), 0.0);
                if constexpr (Second) {
                    std::fill(lap.begin(), lap.end(), 0.0);
                    for (int axis = 0; axis < 3; ++axis) {
                        apply_stencil<true>(d, axis, f.data(), deriv.data());
                        for (std::size_t i = 0; i < sp; ++i) lap[i] += deriv[i];
                    }
                    for (auto &v : lap) v *= k;
                    for (int axis = 0; axis < 3; ++axis) {
                        apply_stencil_adjoint<true>(d, axis, lap.data(), gf.data());
                    }
                } else {
                    for (int axis = 0; axis < 3; ++axis) {
                        apply_stencil<false>(d, axis, f.data(), deriv.data());
                        for (auto &v : deriv) v *= k;
                        apply_stencil_adjoint<false>(d, axis, deriv.data(), gf.data());
                    }
                }
                float *gc = g.data() + c * sp;
                for (std::size_t i = 0; i < sp; ++i) gc[i] += static_cast<float>(gf[i]);
            }
        };
    }
    return out;
}

} // namespace

Tensor jacobian_rms(const Tensor &dvf) { return field_derivative_rms<false>(dvf, "jacobian_rms"); }
Tensor laplacian_rms(const Tensor &dvf) { return field_derivative_rms<true>(dvf, "laplacian_rms"); }

} // namespace dirforge::nn
