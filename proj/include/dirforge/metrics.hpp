#pragma once

// Registration quality metrics: landmark TRE, masked MAE and NCC, Dice of
// threshold masks, and Jacobian-determinant fold detection.

#include <filesystem>
#include <string>
#include <vector>

#include "dirforge/dvf.hpp"
#include "dirforge/landmarks.hpp"
#include "dirforge/volume.hpp"
#include "json.hpp"

namespace dirforge {

struct TreEntry {
    int id = 0;
    double mm = 0.0;
};

// Euclidean distance per matching id, sorted by id. Throws DataError when the
// id sets differ.
std::vector<TreEntry> tre(const LandmarkSet &deformed, const LandmarkSet &target);

// Carries moving-image landmarks into the deformed (target) frame: finds p
// with p + dvf(p) = x for each landmark x by fixed-point iteration on the
// trilinearly sampled field.
LandmarkSet map_landmarks(const LandmarkSet &moving, const DVF &dvf, const Vec3 &spacing);

// Mean absolute difference over the mask. Throws DataError on an empty mask.
double mae(const Volume &deformed, const Volume &target, const Mask &body);
// Pearson correlation over the mask. Throws DataError on zero variance.
double ncc_metric(const Volume &deformed, const Volume &target, const Mask &body);
// 2|A and B| / (|A| + |B|). Throws DataError when both are empty.
double dsc(const Mask &a, const Mask &b);

struct JacobianReport {
    double min_det = 1.0;
    double fold_fraction = 0.0;
};

// det(I + grad u) with central differences over interior voxels (all
// voxels, one-sided at the faces, when some axis has fewer than 3 samples).
JacobianReport jacobian_report(const DVF &dvf);

struct MetricReport {
    std::string fraction = "1";
    std::vector<TreEntry> tre_per_landmark;
    double tre_mean = 0.0;
    // Sample standard deviation (n - 1); 0 for a single landmark.
    double tre_std = 0.0;
    double mae = 0.0;
    double ncc = 0.0;
    double dsc = 0.0;
    double jacobian_min = 1.0;
    double fold_fraction = 0.0;
    double body_hu = kBodyThresholdHu;
    double bone_hu = kBoneThresholdHu;

    [[nodiscard]] nlohmann::json to_json() const;
};

struct EvaluationInputs {
    const Volume &deformed;
    const Volume &target;
    const DVF &dvf;
    const LandmarkSet &landmarks_moving;
    const LandmarkSet &landmarks_target;
    double body_hu = kBodyThresholdHu;
    double bone_hu = kBoneThresholdHu;
};

MetricReport evaluate(const EvaluationInputs &in);

std::string report_csv_header();
// Per-fraction rows followed by an "overall" row (TRE pooled over all
// landmarks, other columns averaged).
std::string report_csv(const std::vector<MetricReport> &rows);

} // namespace dirforge
