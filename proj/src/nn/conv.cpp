// 3D convolution as im2col over z-slabs followed by a GEMM.

#include <Eigen/Core>
#include <algorithm>
#include <stdexcept>

#include "dirforge/nn/ops.hpp"

namespace dirforge::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstMatMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

constexpr std::size_t kColBudget = std::size_t{1} << 21;

struct Geometry {
    Shape in;
    Shape out;
    ConvSpec spec;
    int K = 0;

    [[nodiscard]] int slab_depth() const {
        const std::size_t plane = static_cast<std::size_t>(out.x) * out.y * static_cast<std::size_t>(K);
        return static_cast<int>(std::clamp<std::size_t>(kColBudget / std::max<std::size_t>(plane, 1), 1,
                                                        static_cast<std::size_t>(out.z)));
    }

    // Inclusive range of output x with a valid input x for kernel offset kx.
    void valid_range(int kx, int &lo, int &hi) const {
        const int s = spec.stride;
        const int p = spec.padding;
        auto floor_div = [](int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
        lo = std::max(0, -floor_div(kx - p, s));
        hi = std::min(out.x - 1, floor_div(in.x - 1 + p - kx, s));
    }
};

// Fills col (K x M) for output z in [z0, z1) of batch item `input`.
void im2col(const Geometry &g, const float *input, int z0, int z1, float *col) {
    const auto &sp = g.spec;
    const int kx = sp.kernel[0], ky = sp.kernel[1], kz = sp.kernel[2];
    const std::size_t M = static_cast<std::size_t>(z1 - z0) * g.out.y * g.out.x;
    const std::size_t in_plane = static_cast<std::size_t>(g.in.x) * g.in.y;
    const std::size_t in_vol = in_plane * g.in.z;
    int r = 0;
    for (int ci = 0; ci < g.in.c; ++ci) {
        const float *ich = input + ci * in_vol;
        for (int dz = 0; dz < kz; ++dz) {
            for (int dy = 0; dy < ky; ++dy) {
                for (int dx = 0; dx < kx; ++dx, ++r) {
                    float *row = col + static_cast<std::size_t>(r) * M;
                    int lo = 0, hi = -1;
                    g.valid_range(dx, lo, hi);
                    std::size_t m = 0;
                    for (int oz = z0; oz < z1; ++oz) {
                        const int iz = oz * sp.stride - sp.padding + dz;
                        for (int oy = 0; oy < g.out.y; ++oy, m += g.out.x) {
                            const int iy = oy * sp.stride - sp.padding + dy;
                            float *dst = row + m;
                            if (iz < 0 || iz >= g.in.z || iy < 0 || iy >= g.in.y || lo > hi) {
                                std::fill_n(dst, g.out.x, 0.0f);
                                continue;
                            }
                            const float *src = ich + iz * in_plane + static_cast<std::size_t>(iy) * g.in.x;
                            std::fill_n(dst, lo, 0.0f);
                            if (sp.stride == 1) {
                                std::copy_n(src + (lo - sp.padding + dx), hi - lo + 1, dst + lo);
                            } else {
                                for (int ox = lo; ox <= hi; ++ox) {
                                    dst[ox] = src[ox * sp.stride - sp.padding + dx];
                                }
                            }
                            std::fill(dst + hi + 1, dst + g.out.x, 0.0f);
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add col (K x M) into grad_input.
void col2im(const Geometry &g, const float *col, int z0, int z1, float *grad_input) {
    const auto &sp = g.spec;
    const int kx = sp.kernel[0], ky = sp.kernel[1], kz = sp.kernel[2];
    const std::size_t M = static_cast<std::size_t>(z1 - z0) * g.out.y * g.out.x;
    const std::size_t in_plane = static_cast<std::size_t>(g.in.x) * g.in.y;
    const std::size_t in_vol = in_plane * g.in.z;
    int r = 0;
    for (int ci = 0; ci < g.in.c; ++ci) {
        float *ich = grad_input + ci * in_vol;
        for (int dz = 0; dz < kz; ++dz) {
            for (int dy = 0; dy < ky; ++dy) {
                for (int dx = 0; dx < kx; ++dx, ++r) {
                    const float *row = col + static_cast<std::size_t>(r) * M;
                    int lo = 0, hi = -1;
                    g.valid_range(dx, lo, hi);
                    std::size_t m = 0;
                    for (int oz = z0; oz < z1; ++oz) {
                        const int iz = oz * sp.stride - sp.padding + dz;
                        for (int oy = 0; oy < g.out.y; ++oy, m += g.out.x) {
                            const int iy = oy * sp.stride - sp.padding + dy;
                            if (iz < 0 || iz >= g.in.z || iy < 0 || iy >= g.in.y) {
                                continue;
                            }
                            float *dst = ich + iz * in_plane + static_cast<std::size_t>(iy) * g.in.x;
                            const float *src = row + m;
                            for (int ox = lo; ox <= hi; ++ox) {
                                dst[ox * sp.stride - sp.padding + dx] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

} // namespace

void ConvSpec::validate() const {
    if (in_channels < 1 || out_channels < 1) {
        throw std::invalid_argument("ConvSpec: channel counts must be >= 1");
    }
    for (int k : kernel) {
        if (k < 1 || k % 2 == 0) {
            throw std::invalid_argument("ConvSpec: kernel must be odd in every axis");
        }
    }
    if (stride < 1 || padding < 0) {
        throw std::invalid_argument("ConvSpec: stride must be >= 1 and padding >= 0");
    }
}

Tensor conv3d(const Tensor &input, const Tensor &weights, const Tensor &bias, const ConvSpec &spec) {
    spec.validate();
    const Shape &is = input.shape();
    if (is.c != spec.in_channels) {
        throw std::invalid_argument("conv3d: input has " + std::to_string(is.c) + " channels, spec expects " +
                                    std::to_string(spec.in_channels));
    }
    const Shape ws{spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
    if (!(weights.shape() == ws)) {
        throw std::invalid_argument("conv3d: weights shape " + to_string(weights.shape()) + " != " + to_string(ws));
    }
    if (bias.defined() && bias.shape().numel() != static_cast<std::size_t>(spec.out_channels)) {
        throw std::invalid_argument("conv3d: bias must have out_channels entries");
    }
    Geometry g;
    g.in = is;
    g.spec = spec;
    g.out = Shape{is.n, spec.out_channels, spec.out_size(is.x, 0), spec.out_size(is.y, 1), spec.out_size(is.z, 2)};
    if (g.out.x < 1 || g.out.y < 1 || g.out.z < 1) {
        throw std::invalid_argument("conv3d: input " + to_string(is) + " too small for kernel/stride");
    }
    g.K = spec.in_channels * spec.kernel[0] * spec.kernel[1] * spec.kernel[2];

    Tensor out = make_result(g.out, {&input, &weights, &bias});
    const std::size_t out_sp = g.out.spatial();
    const std::size_t in_sp = is.spatial();
    const std::size_t plane = static_cast<std::size_t>(g.out.x) * g.out.y;
    const int depth = g.slab_depth();
    std::vector<float> col(static_cast<std::size_t>(g.K) * plane * depth);
    const Eigen::Map<const RowMat> W(weights.values().data(), spec.out_channels, g.K);
    auto o = out.mutable_values();

    for (int n = 0; n < is.n; ++n) {
        const float *in_n = input.values().data() + static_cast<std::size_t>(n) * is.c * in_sp;
        float *out_n = o.data() + static_cast<std::size_t>(n) * g.out.c * out_sp;
        for (int z0 = 0; z0 < g.out.z; z0 += depth) {
            const int z1 = std::min(g.out.z, z0 + depth);
            const auto M = static_cast<Eigen::Index>(plane * (z1 - z0));
            im2col(g, in_n, z0, z1, col.data());
            const Eigen::Map<const RowMat> C(col.data(), g.K, M);
            MatMap Y(out_n + z0 * plane, spec.out_channels, M, Eigen::OuterStride<>(static_cast<Eigen::Index>(out_sp)));
            Y.noalias() = W * C;
        }
        if (bias.defined()) {
            for (int c = 0; c < g.out.c; ++c) {
                const float b = bias.values()[static_cast<std::size_t>(c)];
                float *ch = out_n + c * out_sp;
                for (std::size_t i = 0; i < out_sp; ++i) {
                    ch[i] += b;
                }
            }
        }
    }

    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *xn = input.node().get();
        Node *wn = weights.node().get();
        Node *bn = bias.defined() ? bias.node().get() : nullptr;
        on->backward_fn = [on, xn, wn, bn, g, depth] {
            const std::size_t out_sp = g.out.spatial();
            const std::size_t in_sp = g.in.spatial();
            const std::size_t plane = static_cast<std::size_t>(g.out.x) * g.out.y;
            std::vector<float> col(static_cast<std::size_t>(g.K) * plane * depth);
            const Eigen::Map<const RowMat> W(wn->value.data(), g.out.c, g.K);
            RowMat dW = RowMat::Zero(g.out.c, g.K);
            for (int n = 0; n < g.in.n; ++n) {
                const float *in_n = xn->value.data() + static_cast<std::size_t>(n) * g.in.c * in_sp;
                const float *gout_n = on->grad.data() + static_cast<std::size_t>(n) * g.out.c * out_sp;
                float *gin_n = xn->requires_grad ? xn->grad_buffer().data() + static_cast<std::size_t>(n) * g.in.c * in_sp
                                                 : nullptr;
                for (int z0 = 0; z0 < g.out.z; z0 += depth) {
                    const int z1 = std::min(g.out.z, z0 + depth);
                    const auto M = static_cast<Eigen::Index>(plane * (z1 - z0));
                    ConstMatMap dY(gout_n + z0 * plane, g.out.c, M, Eigen::OuterStride<>(static_cast<Eigen::Index>(out_sp)));
                    if (wn->requires_grad) {
                        im2col(g, in_n, z0, z1, col.data());
                        const Eigen::Map<const RowMat> C(col.data(), g.K, M);
                        dW.noalias() += dY * C.transpose();
                    }
                    if (gin_n != nullptr) {
                        Eigen::Map<RowMat> dC(col.data(), g.K, M);
                        dC.noalias() = W.transpose() * dY;
                        col2im(g, col.data(), z0, z1, gin_n);
                    }
                }
                if (bn != nullptr && bn->requires_grad) {
                    auto &gb = bn->grad_buffer();
                    for (int c = 0; c < g.out.c; ++c) {
                        double s = 0.0;
                        const float *ch = gout_n + c * out_sp;
                        for (std::size_t i = 0; i < out_sp; ++i) {
                            s += ch[i];
                        }
                        gb[static_cast<std::size_t>(c)] += static_cast<float>(s);
                    }
                }
            }
            if (wn->requires_grad) {
                auto &gw = wn->grad_buffer();
                Eigen::Map<RowMat>(gw.data(), g.out.c, g.K) += dW;
            }
        };
    }
    return out;
}

} // namespace dirforge::nn
