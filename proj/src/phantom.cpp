#include "dirforge/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dirforge/errors.hpp"

namespace dirforge {

namespace {

constexpr double kAirHu = -1000.0;
constexpr double kBoneHu = 700.0;
constexpr double kFiducialHu = 1000.0;
constexpr double kGasHu = -700.0;
constexpr double kFiducialRadiusMm = 2.5;
constexpr double kEdgeMm = 0.8;

Vec3 add(const Vec3 &a, const Vec3 &b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 sub(const Vec3 &a, const Vec3 &b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double norm(const Vec3 &a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

Vec3 extent(const Dims &d, const Vec3 &s) {
    return {(d.nx - 1) * s[0], (d.ny - 1) * s[1], (d.nz - 1) * s[2]};
}

struct Ellipsoid {
    Vec3 center{};
    Vec3 semi{};

    [[nodiscard]] double rho(const Vec3 &p) const {
        double r2 = 0.0;
        for (std::size_t a = 0; a < 3; ++a) {
            const double t = (p[a] - center[a]) / semi[a];
            r2 += t * t;
        }
        return std::sqrt(r2);
    }
    // Smooth inside-indicator with an approximately kEdgeMm wide rim.
    [[nodiscard]] double indicator(const Vec3 &p) const {
        const double amin = std::min({semi[0], semi[1], semi[2]});
        const double d = (1.0 - rho(p)) * amin;
        return 0.5 * (1.0 + std::tanh(d / kEdgeMm));
    }
};

struct Wave {
    Vec3 k{};
    double phase = 0.0;
    double amplitude = 0.0;
};

// Analytic target-frame intensity model.
class PhantomModel {
public:
    PhantomModel(const Dims &dims, const Vec3 &spacing, std::mt19937_64 &rng) {
        const Vec3 L = extent(dims, spacing);
        const Vec3 c{0.5 * L[0], 0.5 * L[1], 0.5 * L[2]};
        auto rel = [&](double fx, double fy, double fz) { return Vec3{c[0] + fx * L[0], c[1] + fy * L[1], c[2] + fz * L[2]}; };
        auto size = [&](double fx, double fy, double fz) {
            return Vec3{std::max(fx * L[0], 1.0), std::max(fy * L[1], 1.0), std::max(fz * L[2], 1.0)};
        };
        body_ = Ellipsoid{c, size(0.42, 0.34, 0.44)};
        organ_ = Ellipsoid{rel(-0.10, -0.08, -0.15), size(0.18, 0.14, 0.22)};
        gas_ = Ellipsoid{rel(0.16, -0.10, 0.02), size(0.07, 0.06, 0.08)};
        bones_ = {Ellipsoid{rel(0.0, 0.22, 0.22), size(0.09, 0.07, 0.13)},
                  Ellipsoid{rel(-0.30, 0.10, 0.26), size(0.04, 0.06, 0.10)},
                  Ellipsoid{rel(0.30, 0.10, 0.26), size(0.04, 0.06, 0.10)}};

        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        std::uniform_real_distribution<double> wavelength(10.0, 24.0);
        std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
        for (int i = 0; i < 10; ++i) {
            Vec3 dir{};
            double n = 0.0;
            do {
                dir = {unit(rng), unit(rng), unit(rng)};
                n = norm(dir);
            } while (n < 1e-3 || n > 1.0);
            const double k = 2.0 * std::numbers::pi / wavelength(rng);
            waves_.push_back(Wave{{dir[0] / n * k, dir[1] / n * k, dir[2] / n * k}, phase(rng), 12.0});
        }
    }

    [[nodiscard]] const Ellipsoid &body() const { return body_; }
    [[nodiscard]] const std::vector<Ellipsoid> &bones() const { return bones_; }
    void add_fiducial(const Vec3 &centre) { fiducials_.push_back(centre); }

    [[nodiscard]] double value(const Vec3 &p) const {
        double tissue = 0.0;
        for (const auto &w : waves_) {
            tissue += w.amplitude * std::cos(w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase);
        }
        tissue += 60.0 * organ_.indicator(p);
        tissue = std::lerp(tissue, kGasHu, gas_.indicator(p));
        for (const auto &b : bones_) {
            tissue = std::lerp(tissue, kBoneHu, b.indicator(p));
        }
        double v = std::lerp(kAirHu, tissue, body_.indicator(p));
        for (const auto &f : fiducials_) {
            const double d = kFiducialRadiusMm - norm(sub(p, f));
            v = std::lerp(v, kFiducialHu, 0.5 * (1.0 + std::tanh(d / (0.5 * kEdgeMm))));
        }
        return v;
    }

private:
    Ellipsoid body_{};
    Ellipsoid organ_{};
    Ellipsoid gas_{};
    std::vector<Ellipsoid> bones_;
    std::vector<Wave> waves_;
    std::vector<Vec3> fiducials_;
};

Vec3 bump_displacement(const GaussianBump &b, const Vec3 &p) {
    const Vec3 d = sub(p, b.center_mm);
    const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    const double g = b.peak_mm * std::exp(-r2 / (2.0 * b.sigma_mm * b.sigma_mm));
    const double n = norm(b.direction);
    return {g * b.direction[0] / n, g * b.direction[1] / n, g * b.direction[2] / n};
}

void validate_deformation(const Deformation &def) {
    if (const auto *r = std::get_if<RigidShift>(&def.kind)) {
        for (double v : r->shift_mm) {
            if (!std::isfinite(v)) {
                throw DataError("rigid_shift must be finite");
            }
        }
    } else if (const auto *b = std::get_if<GaussianBump>(&def.kind)) {
        if (!(b->sigma_mm > 0.0) || !std::isfinite(b->sigma_mm)) {
            throw DataError("gaussian_bump sigma must be positive");
        }
        if (!(std::abs(b->peak_mm) <= 0.4 * b->sigma_mm)) {
            throw DataError("gaussian_bump peak must satisfy |peak| <= 0.4 * sigma");
        }
        if (!(norm(b->direction) > 0.0)) {
            throw DataError("gaussian_bump direction must be nonzero");
        }
    } else {
        for (const auto &part : std::get<Composite>(def.kind).parts) {
            validate_deformation(part);
        }
    }
}

} // namespace

void PhantomSpec::validate() const {
    if (!dims.valid()) {
        throw DataError("phantom dims must be >= 1");
    }
    validate_spacing(spacing);
    if (landmark_count < 4) {
        throw DataError("landmark_count must be >= 4");
    }
    validate_deformation(deformation);
}

Vec3 deformation_map(const Deformation &def, const Vec3 &p) {
    if (const auto *r = std::get_if<RigidShift>(&def.kind)) {
        return add(p, r->shift_mm);
    }
    if (const auto *b = std::get_if<GaussianBump>(&def.kind)) {
        return add(p, bump_displacement(*b, p));
    }
    Vec3 q = p;
    for (const auto &part : std::get<Composite>(def.kind).parts) {
        q = deformation_map(part, q);
    }
    return q;
}

Vec3 deformation_inverse(const Deformation &def, const Vec3 &q) {
    if (const auto *r = std::get_if<RigidShift>(&def.kind)) {
        return sub(q, r->shift_mm);
    }
    if (const auto *b = std::get_if<GaussianBump>(&def.kind)) {
        // Contraction: the Lipschitz constant of u is <= 0.61 * peak / sigma <= 0.25.
        Vec3 p = q;
        for (int it = 0; it < 100; ++it) {
            const Vec3 next = sub(q, bump_displacement(*b, p));
            const double step = norm(sub(next, p));
            p = next;
            if (step < 1e-13) {
                break;
            }
        }
        return p;
    }
    const auto &parts = std::get<Composite>(def.kind).parts;
    Vec3 p = q;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        p = deformation_inverse(*it, p);
    }
    return p;
}

Vec3 default_bump_center(const Dims &dims, const Vec3 &spacing) {
    // Snapped to a voxel centre so the sampled field attains its peak.
    const Vec3 L = extent(dims, spacing);
    const Vec3 c{0.40 * L[0], 0.42 * L[1], 0.35 * L[2]};
    return {std::round(c[0] / spacing[0]) * spacing[0], std::round(c[1] / spacing[1]) * spacing[1],
            std::round(c[2] / spacing[2]) * spacing[2]};
}

Phantom make_phantom(const PhantomSpec &spec) {
    spec.validate();
    const Dims &d = spec.dims;
    const Vec3 &s = spec.spacing;
    std::mt19937_64 rng(spec.seed);
    PhantomModel model(d, s, rng);

    // Fiducials sit on target voxel centres, inside the body, clear of bone,
    // of each other and of the grid border (in both frames).
    const int margin = 3;
    for (int a = 0; a < 3; ++a) {
        if (d[a] < 2 * margin + 1) {
            throw DataError("phantom dims too small to place fiducials");
        }
    }
    std::uniform_int_distribution<int> ix(margin, d.nx - 1 - margin);
    std::uniform_int_distribution<int> iy(margin, d.ny - 1 - margin);
    std::uniform_int_distribution<int> iz(margin, d.nz - 1 - margin);
    const Vec3 L = extent(d, s);
    LandmarkSet target_lm;
    LandmarkSet moving_lm;
    std::vector<Vec3> placed;
    int attempts = 0;
    while (static_cast<int>(placed.size()) < spec.landmark_count) {
        if (++attempts > 200000) {
            throw DataError("could not place " + std::to_string(spec.landmark_count) + " fiducials");
        }
        const Vec3 p{ix(rng) * s[0], iy(rng) * s[1], iz(rng) * s[2]};
        if (model.body().rho(p) > 0.75) {
            continue;
        }
        bool ok = true;
        for (const auto &b : model.bones()) {
            ok = ok && b.rho(p) > 1.0 + (kFiducialRadiusMm + 3.0) / std::min({b.semi[0], b.semi[1], b.semi[2]});
        }
        for (const auto &q : placed) {
            ok = ok && norm(sub(p, q)) >= 8.0;
        }
        const Vec3 m = deformation_map(spec.deformation, p);
        for (std::size_t a = 0; a < 3; ++a) {
            ok = ok && m[a] >= margin * s[a] && m[a] <= L[a] - margin * s[a];
        }
        if (!ok) {
            continue;
        }
        placed.push_back(p);
        model.add_fiducial(p);
        const int id = static_cast<int>(placed.size());
        target_lm.entries.push_back(Landmark{id, p});
        moving_lm.entries.push_back(Landmark{id, m});
    }

    Volume target(d, s);
    Volume moving(d, s);
    DVF truth(d);
    const std::size_t n = d.count();
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                const Vec3 p{x * s[0], y * s[1], z * s[2]};
                const std::size_t i = d.index(x, y, z);
                // Whole HU, as scanners store them; keeps global offsets exact.
                target.voxels()[i] = static_cast<float>(std::round(model.value(p)));
                moving.voxels()[i] =
                    static_cast<float>(std::round(model.value(deformation_inverse(spec.deformation, p))));
                const Vec3 u = sub(deformation_map(spec.deformation, p), p);
                for (std::size_t a = 0; a < 3; ++a) {
                    truth.data()[a * n + i] = static_cast<float>(u[a] / s[a]);
                }
            }
        }
    }
    return Phantom{std::move(moving), std::move(target), std::move(truth), std::move(moving_lm), std::move(target_lm)};
}

namespace {

Vec3 vec3_from(const nlohmann::json &j, const char *key) {
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 3) {
        throw DataError(std::string(key) + " must have 3 entries");
    }
    return {v[0], v[1], v[2]};
}

Deformation deformation_from_json(const nlohmann::json &j, const Dims &dims, const Vec3 &spacing) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "rigid_shift") {
        return Deformation{RigidShift{vec3_from(j, "shift_mm")}};
    }
    if (type == "gaussian_bump") {
        GaussianBump b;
        b.center_mm = j.contains("center_mm") ? vec3_from(j, "center_mm") : default_bump_center(dims, spacing);
        b.peak_mm = j.at("peak_mm").get<double>();
        b.sigma_mm = j.at("sigma_mm").get<double>();
        if (j.contains("direction")) {
            b.direction = vec3_from(j, "direction");
        }
        return Deformation{b};
    }
    if (type == "composite") {
        Composite c;
        for (const auto &part : j.at("parts")) {
            c.parts.push_back(deformation_from_json(part, dims, spacing));
        }
        return Deformation{std::move(c)};
    }
    throw DataError("unknown deformation type '" + type + "'");
}

nlohmann::json deformation_to_json(const Deformation &def) {
    if (const auto *r = std::get_if<RigidShift>(&def.kind)) {
        return {{"type", "rigid_shift"}, {"shift_mm", r->shift_mm}};
    }
    if (const auto *b = std::get_if<GaussianBump>(&def.kind)) {
        return {{"type", "gaussian_bump"},
                {"center_mm", b->center_mm},
                {"peak_mm", b->peak_mm},
                {"sigma_mm", b->sigma_mm},
                {"direction", b->direction}};
    }
    nlohmann::json parts = nlohmann::json::array();
    for (const auto &p : std::get<Composite>(def.kind).parts) {
        parts.push_back(deformation_to_json(p));
    }
    return {{"type", "composite"}, {"parts", parts}};
}

} // namespace

PhantomSpec phantom_spec_from_json(const nlohmann::json &j) {
    PhantomSpec spec;
    try {
        if (j.contains("dims")) {
            const auto v = j.at("dims").get<std::vector<int>>();
            if (v.size() != 3) {
                throw DataError("dims must have 3 entries");
            }
            spec.dims = Dims{v[0], v[1], v[2]};
        }
        if (j.contains("spacing_mm")) {
            spec.spacing = vec3_from(j, "spacing_mm");
        }
        spec.seed = j.value("seed", std::uint64_t{0});
        spec.landmark_count = j.value("landmark_count", 8);
        spec.deformation = deformation_from_json(j.at("deformation"), spec.dims, spec.spacing);
    } catch (const nlohmann::json::exception &e) {
        throw DataError(std::string("invalid phantom spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

nlohmann::json phantom_spec_to_json(const PhantomSpec &spec) {
    return {{"dims", {spec.dims.nx, spec.dims.ny, spec.dims.nz}},
            {"spacing_mm", spec.spacing},
            {"seed", spec.seed},
            {"landmark_count", spec.landmark_count},
            {"deformation", deformation_to_json(spec.deformation)}};
}

} // namespace dirforge
