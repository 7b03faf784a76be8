#pragma once

// Shared helpers for the unit tests: seeded random data and a central
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dirforge/nn/ops.hpp"
#include "dirforge/volume.hpp"

namespace testing {

inline std::vector<float> random_values(std::size_t n, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<float> v(n);
    for (auto &x : v) {
        x = d(rng);
    }
    return v;
}

inline dirforge::nn::Tensor random_tensor(dirforge::nn::Shape s, std::uint64_t seed, bool requires_grad = true,
                                          float lo = -1.0f, float hi = 1.0f) {
    return dirforge::nn::Tensor(s, random_values(s.numel(), seed, lo, hi), requires_grad);
}

// Smooth random volume: a few low-frequency cosines, scaled to HU-like values.
inline dirforge::Volume smooth_volume(dirforge::Dims d, std::uint64_t seed, double amplitude = 200.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    dirforge::Volume v(d, {1.0, 1.0, 1.0});
    struct Wave {
        double kx, ky, kz, phase, amp;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 4; ++i) {
        waves.push_back({0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng), 6.28 * u(rng), amplitude * (0.5 + u(rng))});
    }
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                double s = 0.0;
                for (const auto &w : waves) {
                    s += w.amp * std::cos(w.kx * x + w.ky * y + w.kz * z + w.phase);
                }
                v.at(x, y, z) = static_cast<float>(s);
            }
        }
    }
    return v;
}

struct GradCheckResult {
    // ||analytic - numeric|| / max(||analytic||, ||numeric||) over the sampled entries.
    double rel_error = 0.0;
    double numeric_norm = 0.0;
};

enum class Pick { random, largest };

// Compares `analytic` (d value / d wrt) with central differences of `value`,
// which is evaluated in double. Pick::largest samples the entries with the
// largest analytic gradient, keeping float rounding of big composite losses
// small relative to the signal. The step is the actual float perturbation.
inline GradCheckResult compare_gradients(dirforge::nn::Tensor &wrt, const std::vector<float> &analytic,
                                         const std::function<double()> &value, std::size_t samples = 24,
                                         std::uint64_t seed = 7, double h = 1e-3, Pick pick = Pick::random) {
    std::mt19937_64 rng(seed);
    const std::size_t n = wrt.shape().numel();
    std::vector<std::size_t> idx;
    if (n <= samples) {
        for (std::size_t i = 0; i < n; ++i) {
            idx.push_back(i);
        }
    } else if (pick == Pick::largest && !analytic.empty()) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) {
            order[i] = i;
        }
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(samples), order.end(),
                          [&](std::size_t a, std::size_t b) { return std::abs(analytic[a]) > std::abs(analytic[b]); });
        idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(samples));
    } else {
        std::uniform_int_distribution<std::size_t> pick_index(0, n - 1);
        for (std::size_t k = 0; k < samples; ++k) {
            idx.push_back(pick_index(rng));
        }
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : idx) {
        auto v = wrt.mutable_values();
        const float orig = v[i];
        v[i] = static_cast<float>(orig + h);
        const double hp = static_cast<double>(v[i]) - orig;
        const double lp = value();
        v[i] = static_cast<float>(orig - h);
        const double hm = orig - static_cast<double>(v[i]);
        const double lm = value();
        v[i] = orig;
        const double numeric = (lp - lm) / (hp + hm);
        const double a = analytic.empty() ? 0.0 : analytic[i];
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-30);
    return {std::sqrt(diff2) / denom, std::sqrt(n2)};
}

// Checks d/d(wrt) of L = sum(f() * R) for a fixed random R.
inline GradCheckResult grad_check(dirforge::nn::Tensor &wrt, const std::function<dirforge::nn::Tensor()> &f,
                                  std::size_t samples = 24, std::uint64_t seed = 7, double h = 1e-3,
                                  Pick pick = Pick::random) {
    using namespace dirforge::nn;
    Tensor out = f();
    const Tensor r(out.shape(), random_values(out.shape().numel(), seed + 1000, 0.5f, 1.5f));
    wrt.zero_grad();
    sum(mul(out, r)).backward();
    const std::vector<float> analytic(wrt.grad().begin(), wrt.grad().end());
    auto project = [&] {
        NoGradGuard ng;
        const Tensor o = f();
        double s = 0.0;
        for (std::size_t i = 0; i < o.values().size(); ++i) {
            s += static_cast<double>(o.values()[i]) * static_cast<double>(r.values()[i]);
        }
        return s;
    };
    return compare_gradients(wrt, analytic, project, samples, seed, h, pick);
}

// Directional form of the same check for large inputs, where per-entry
// differences drown in float rounding of the scalar output: compares
// L(x + h v) - L(x - h v) with grad . (actual step) along random +-1 directions.
inline GradCheckResult directional_check(dirforge::nn::Tensor &wrt, const std::function<dirforge::nn::Tensor()> &f,
                                         int directions = 6, std::uint64_t seed = 7, double h = 1e-3) {
    using namespace dirforge::nn;
    Tensor out = f();
    const Tensor r(out.shape(), random_values(out.shape().numel(), seed + 1000, 0.5f, 1.5f));
    wrt.zero_grad();
    sum(mul(out, r)).backward();
    const std::vector<float> analytic(wrt.grad().begin(), wrt.grad().end());

    auto project = [&] {
        NoGradGuard ng;
        const Tensor o = f();
        double s = 0.0;
        for (std::size_t i = 0; i < o.values().size(); ++i) {
            s += static_cast<double>(o.values()[i]) * static_cast<double>(r.values()[i]);
        }
        return s;
    };

    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(0.5);
    const std::vector<float> orig(wrt.values().begin(), wrt.values().end());
    const std::size_t n = orig.size();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (int k = 0; k < directions; ++k) {
        std::vector<double> dir(n);
        for (auto &d : dir) {
            d = coin(rng) ? 1.0 : -1.0;
        }
        auto v = wrt.mutable_values();
        double expected = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = static_cast<float>(orig[i] + h * dir[i]);
            expected += (analytic.empty() ? 0.0 : analytic[i]) * (static_cast<double>(v[i]) - orig[i]);
        }
        const double lp = project();
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = static_cast<float>(orig[i] - h * dir[i]);
            expected += (analytic.empty() ? 0.0 : analytic[i]) * (orig[i] - static_cast<double>(v[i]));
        }
        const double lm = project();
        std::copy(orig.begin(), orig.end(), v.begin());
        const double numeric = lp - lm;
        diff2 += (expected - numeric) * (expected - numeric);
        a2 += expected * expected;
        n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-30);
    return {std::sqrt(diff2) / denom, std::sqrt(n2)};
}

inline std::filesystem::path scratch_dir(const std::string &name) {
    const auto p = std::filesystem::temp_directory_path() / ("dirforge_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace testing
