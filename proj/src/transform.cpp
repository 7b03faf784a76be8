#include "dirforge/transform.hpp"

#include <algorithm>
#include <cmath>

#include "dirforge/errors.hpp"
#include "dirforge/sampling.hpp"

namespace dirforge {

DVF::DVF(Dims dims) : DVF(dims, std::vector<float>(dims.valid() ? 3 * dims.count() : 0, 0.0f)) {}

DVF::DVF(Dims dims, std::vector<float> data) : dims_(dims), data_(std::move(data)) {
    if (!dims_.valid()) {
        throw DataError("DVF dims must be >= 1, got " + to_string(dims_));
    }
    if (data_.size() != 3 * dims_.count()) {
        throw DataError("DVF payload does not match 3 x dims " + to_string(dims_));
    }
    for (float v : data_) {
        if (!std::isfinite(v)) {
            throw DataError("DVF contains non-finite displacement");
        }
    }
}

std::span<const float> DVF::component(int c) const {
    return std::span<const float>(data_).subspan(static_cast<std::size_t>(c) * dims_.count(), dims_.count());
}

std::span<float> DVF::component(int c) {
    return std::span<float>(data_).subspan(static_cast<std::size_t>(c) * dims_.count(), dims_.count());
}

Vec3 DVF::at(int x, int y, int z) const {
    const std::size_t i = dims_.index(x, y, z);
    const std::size_t n = dims_.count();
    return {data_[i], data_[n + i], data_[2 * n + i]};
}

Volume warp(const Volume &vol, const DVF &dvf) {
    const Dims &d = vol.dims();
    if (!(dvf.dims() == d)) {
        throw std::invalid_argument("warp: DVF dims " + to_string(dvf.dims()) + " != volume dims " + to_string(d));
    }
    Volume out(d, vol.spacing());
    const float *src = vol.voxels().data();
    const auto ux = dvf.component(0);
    const auto uy = dvf.component(1);
    const auto uz = dvf.component(2);
    auto dst = out.voxels();
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                const std::size_t i = d.index(x, y, z);
                dst[i] = static_cast<float>(sampling::sample(src, d, x + static_cast<double>(ux[i]),
                                                             y + static_cast<double>(uy[i]),
                                                             z + static_cast<double>(uz[i])));
            }
        }
    }
    return out;
}

DVF upsample_dvf(const DVF &dvf, const Dims &target) {
    const Dims &s = dvf.dims();
    if (!target.valid() || target.nx < s.nx || target.ny < s.ny || target.nz < s.nz) {
        throw std::invalid_argument("upsample_dvf: target " + to_string(target) + " is smaller than source " +
                                    to_string(s));
    }
    const auto tx = sampling::resample_axis(s.nx, target.nx);
    const auto ty = sampling::resample_axis(s.ny, target.ny);
    const auto tz = sampling::resample_axis(s.nz, target.nz);
    const double scale[3] = {static_cast<double>(target.nx) / s.nx, static_cast<double>(target.ny) / s.ny,
                             static_cast<double>(target.nz) / s.nz};
    DVF out(target);
    for (int c = 0; c < 3; ++c) {
        const float *src = dvf.component(c).data();
        auto dst = out.component(c);
        for (int z = 0; z < target.nz; ++z) {
            for (int y = 0; y < target.ny; ++y) {
                for (int x = 0; x < target.nx; ++x) {
                    const sampling::Stencil3 st{{tx[static_cast<std::size_t>(x)], ty[static_cast<std::size_t>(y)],
                                                 tz[static_cast<std::size_t>(z)]}};
                    dst[target.index(x, y, z)] = static_cast<float>(sampling::sample(src, s, st) * scale[c]);
                }
            }
        }
    }
    return out;
}

DVF compose(const DVF &global, const DVF &local) {
    const Dims &d = global.dims();
    if (!(local.dims() == d)) {
        throw std::invalid_argument("compose: field dims differ");
    }
    DVF out(d);
    const std::size_t n = d.count();
    const auto lx = local.component(0);
    const auto ly = local.component(1);
    const auto lz = local.component(2);
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                const std::size_t i = d.index(x, y, z);
                const auto st = sampling::stencil3(d, x + static_cast<double>(lx[i]), y + static_cast<double>(ly[i]),
                                                   z + static_cast<double>(lz[i]));
                for (int c = 0; c < 3; ++c) {
                    const double g = sampling::sample(global.component(c).data(), d, st);
                    out.data()[static_cast<std::size_t>(c) * n + i] =
                        static_cast<float>(g + static_cast<double>(local.component(c)[i]));
                }
            }
        }
    }
    return out;
}

PatchGrid build_patch_grid(const Dims &volume_dims, const Index3 &patch_size, const Index3 &overlap) {
    PatchGrid grid;
    grid.volume_dims = volume_dims;
    grid.patch_size = patch_size;
    std::array<std::vector<int>, 3> axis_starts;
    for (int a = 0; a < 3; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        const int n = volume_dims[a];
        const int p = patch_size[ua];
        const int o = overlap[ua];
        if (p < 1 || p > n) {
            throw std::invalid_argument("build_patch_grid: patch larger than volume along axis " + std::to_string(a));
        }
        if (o < 0 || o >= p) {
            throw std::invalid_argument("build_patch_grid: overlap must satisfy 0 <= overlap < patch");
        }
        const int stride = p - o;
        grid.stride[ua] = stride;
        auto &starts = axis_starts[ua];
        for (int s = 0; s + p <= n; s += stride) {
            starts.push_back(s);
        }
        if (starts.back() + p < n) {
            starts.push_back(n - p);
        }
    }
    for (int z : axis_starts[2]) {
        for (int y : axis_starts[1]) {
            for (int x : axis_starts[0]) {
                grid.starts.push_back({x, y, z});
            }
        }
    }
    return grid;
}

double taper_weight(int i, int n) {
    if (n <= 1) {
        return 1.0;
    }
    const double centre = 0.5 * (n - 1);
    return 1.0 - 0.95 * std::abs(i - centre) / centre;
}

DVF fuse_patches(const std::vector<DVF> &patch_dvfs, const PatchGrid &grid) {
    if (patch_dvfs.size() != grid.size()) {
        throw std::invalid_argument("fuse_patches: " + std::to_string(patch_dvfs.size()) + " patches for a grid of " +
                                    std::to_string(grid.size()));
    }
    const Dims pd{grid.patch_size[0], grid.patch_size[1], grid.patch_size[2]};
    for (const auto &p : patch_dvfs) {
        if (!(p.dims() == pd)) {
            throw std::invalid_argument("fuse_patches: patch dims " + to_string(p.dims()) + " != " + to_string(pd));
        }
    }
    const Dims &d = grid.volume_dims;
    const std::size_t n = d.count();
    std::vector<double> acc(3 * n, 0.0);
    std::vector<double> wsum(n, 0.0);
    std::array<std::vector<double>, 3> w;
    for (int a = 0; a < 3; ++a) {
        for (int i = 0; i < pd[a]; ++i) {
            w[static_cast<std::size_t>(a)].push_back(taper_weight(i, pd[a]));
        }
    }
    const std::size_t pn = pd.count();
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const Index3 &s = grid.starts[k];
        const auto pdata = patch_dvfs[k].data();
        for (int z = 0; z < pd.nz; ++z) {
            for (int y = 0; y < pd.ny; ++y) {
                const double wyz = w[1][static_cast<std::size_t>(y)] * w[2][static_cast<std::size_t>(z)];
                for (int x = 0; x < pd.nx; ++x) {
                    const double wt = w[0][static_cast<std::size_t>(x)] * wyz;
                    const std::size_t pi = pd.index(x, y, z);
                    const std::size_t vi = d.index(s[0] + x, s[1] + y, s[2] + z);
                    wsum[vi] += wt;
                    for (std::size_t c = 0; c < 3; ++c) {
                        acc[c * n + vi] += wt * static_cast<double>(pdata[c * pn + pi]);
                    }
                }
            }
        }
    }
    DVF out(d);
    auto o = out.data();
    for (std::size_t vi = 0; vi < n; ++vi) {
        if (wsum[vi] <= 0.0) {
            throw InvariantError("fuse_patches: voxel not covered by any patch");
        }
        for (std::size_t c = 0; c < 3; ++c) {
            o[c * n + vi] = static_cast<float>(acc[c * n + vi] / wsum[vi]);
        }
    }
    return out;
}

static void check_patch(const Dims &d, const Index3 &start, const Index3 &size) {
    for (int a = 0; a < 3; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        if (start[ua] < 0 || size[ua] < 1 || start[ua] + size[ua] > d[a]) {
            throw std::invalid_argument("extract_patch: patch exceeds volume along axis " + std::to_string(a));
        }
    }
}

Volume extract_patch(const Volume &vol, const Index3 &start, const Index3 &size) {
    check_patch(vol.dims(), start, size);
    Volume out(Dims{size[0], size[1], size[2]}, vol.spacing());
    for (int z = 0; z < size[2]; ++z) {
        for (int y = 0; y < size[1]; ++y) {
            for (int x = 0; x < size[0]; ++x) {
                out.at(x, y, z) = vol.at(start[0] + x, start[1] + y, start[2] + z);
            }
        }
    }
    return out;
}

DVF extract_patch(const DVF &dvf, const Index3 &start, const Index3 &size) {
    check_patch(dvf.dims(), start, size);
    const Dims pd{size[0], size[1], size[2]};
    DVF out(pd);
    for (int c = 0; c < 3; ++c) {
        const auto src = dvf.component(c);
        auto dst = out.component(c);
        for (int z = 0; z < size[2]; ++z) {
            for (int y = 0; y < size[1]; ++y) {
                for (int x = 0; x < size[0]; ++x) {
                    dst[pd.index(x, y, z)] = src[dvf.dims().index(start[0] + x, start[1] + y, start[2] + z)];
                }
            }
        }
    }
    return out;
}

Index3 pooling_factors(const Dims &dims, int max_dim) {
    if (max_dim < 1) {
        throw std::invalid_argument("pooling_factors: max_dim must be >= 1");
    }
    Index3 f{};
    for (int a = 0; a < 3; ++a) {
        f[static_cast<std::size_t>(a)] = (dims[a] + max_dim - 1) / max_dim;
    }
    return f;
}

Volume mean_pool(const Volume &vol, const Index3 &factors) {
    const Dims &d = vol.dims();
    const Dims od{d.nx / factors[0], d.ny / factors[1], d.nz / factors[2]};
    if (!od.valid()) {
        throw std::invalid_argument("mean_pool: factors exceed volume dims");
    }
    if (factors == Index3{1, 1, 1}) {
        return vol;
    }
    const Vec3 sp{vol.spacing()[0] * factors[0], vol.spacing()[1] * factors[1], vol.spacing()[2] * factors[2]};
    Volume out(od, sp);
    const double inv = 1.0 / (static_cast<double>(factors[0]) * factors[1] * factors[2]);
    for (int z = 0; z < od.nz; ++z) {
        for (int y = 0; y < od.ny; ++y) {
            for (int x = 0; x < od.nx; ++x) {
                double s = 0.0;
                for (int k = 0; k < factors[2]; ++k) {
                    for (int j = 0; j < factors[1]; ++j) {
                        for (int i = 0; i < factors[0]; ++i) {
                            s += vol.at(x * factors[0] + i, y * factors[1] + j, z * factors[2] + k);
                        }
                    }
                }
                out.at(x, y, z) = static_cast<float>(s * inv);
            }
        }
    }
    return out;
}

} // namespace dirforge
