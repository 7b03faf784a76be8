#include "dirforge/mind.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace dirforge {

std::vector<Offset3> six_neighbourhood() {
    return {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
}

MindDescriptor compute_mind(const Volume &vol, int patch_radius, const std::vector<Offset3> &neighbourhood) {
    if (patch_radius < 1) {
        throw std::invalid_argument("mind: patch_radius must be >= 1");
    }
    if (neighbourhood.empty()) {
        throw std::invalid_argument("mind: neighbourhood must be nonempty");
    }
    const Dims &d = vol.dims();
    for (const auto &r : neighbourhood) {
        for (int a = 0; a < 3; ++a) {
            if (std::abs(r[static_cast<std::size_t>(a)]) >= d[a]) {
                throw std::invalid_argument("mind: neighbourhood offset exceeds volume dims");
            }
        }
    }
    auto clamped = [&](int x, int y, int z) {
        return static_cast<double>(
            vol.at(std::clamp(x, 0, d.nx - 1), std::clamp(y, 0, d.ny - 1), std::clamp(z, 0, d.nz - 1)));
    };
    const auto [mn, mx] = std::minmax_element(vol.voxels().begin(), vol.voxels().end());
    const double range = static_cast<double>(*mx) - static_cast<double>(*mn);
    const double eps = 1e-6 * range * range;
    const int R = patch_radius;
    const double patch = std::pow(2.0 * R + 1.0, 3.0);
    const std::size_t K = neighbourhood.size();

    MindDescriptor out;
    out.dims = d;
    out.neighbourhood = neighbourhood;
    out.values.assign(K * d.count(), 0.0f);
    std::vector<double> dist(K);
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                for (std::size_t k = 0; k < K; ++k) {
                    const auto &r = neighbourhood[k];
                    double s = 0.0;
                    for (int qz = -R; qz <= R; ++qz) {
                        for (int qy = -R; qy <= R; ++qy) {
                            for (int qx = -R; qx <= R; ++qx) {
                                const double diff = clamped(x + qx, y + qy, z + qz) -
                                                    clamped(x + qx + r[0], y + qy + r[1], z + qz + r[2]);
                                s += diff * diff;
                            }
                        }
                    }
                    dist[k] = s / patch;
                }
                double mean = 0.0;
                for (double v : dist) {
                    mean += v;
                }
                const double var = std::max(mean / static_cast<double>(K), eps);
                const double dmin = *std::min_element(dist.begin(), dist.end());
                for (std::size_t k = 0; k < K; ++k) {
                    // Dividing exp(-D/V) by its channel max equals shifting D by its minimum.
                    const double ratio = var > 0.0 ? (dist[k] - dmin) / var : 0.0;
                    out.values[k * d.count() + d.index(x, y, z)] = static_cast<float>(std::exp(-ratio));
                }
            }
        }
    }
    return out;
}

} // namespace dirforge
