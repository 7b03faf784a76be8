#pragma once

// Synthetic abdominal-like phantoms with analytic ground-truth deformations.

#include <cstdint>
#include <variant>
#include <vector>

#include "dirforge/dvf.hpp"
#include "dirforge/landmarks.hpp"
#include "dirforge/volume.hpp"
#include "json.hpp"

namespace dirforge {

struct RigidShift {
    Vec3 shift_mm{};
};

// u(p) = peak * direction * exp(-|p - centre|^2 / (2 sigma^2)).
struct GaussianBump {
    Vec3 center_mm{};
    double peak_mm = 0.0;
    double sigma_mm = 1.0;
    Vec3 direction{1.0, 0.0, 0.0};
};

struct Deformation;

// Parts are applied in list order.
struct Composite {
    std::vector<Deformation> parts;
};

struct Deformation {
    std::variant<RigidShift, GaussianBump, Composite> kind;
};

struct PhantomSpec {
    Dims dims{64, 64, 64};
    Vec3 spacing{0.9, 0.9, 2.0};
    std::uint64_t seed = 0;
    Deformation deformation{RigidShift{}};
    int landmark_count = 8;

    // Throws DataError when an invariant is violated.
    void validate() const;
};

struct Phantom {
    Volume moving;
    Volume target;
    DVF truth_dvf;
    LandmarkSet landmarks_moving;
    LandmarkSet landmarks_target;
};

// Mapping from a target-frame point to the matching moving-frame point,
// phi(p) = p + u(p), in mm.
Vec3 deformation_map(const Deformation &def, const Vec3 &p_mm);
// phi^{-1}(q), solved by fixed-point iteration for the smooth parts.
Vec3 deformation_inverse(const Deformation &def, const Vec3 &q_mm);

// Default bump centre for a given grid: inside the anterior soft-tissue
// organ, well away from the bony structures.
Vec3 default_bump_center(const Dims &dims, const Vec3 &spacing);

Phantom make_phantom(const PhantomSpec &spec);

PhantomSpec phantom_spec_from_json(const nlohmann::json &j);
nlohmann::json phantom_spec_to_json(const PhantomSpec &spec);

} // namespace dirforge
