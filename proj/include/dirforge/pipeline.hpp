#pragma once

// Two-stage training (global on pooled whole volumes, then local on patches
// of the globally deformed image) and the matching two-stage inference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dirforge/dvf.hpp"
#include "dirforge/losses.hpp"
#include "dirforge/model.hpp"
#include "dirforge/optim.hpp"
#include "dirforge/transform.hpp"
#include "dirforge/volume.hpp"
#include "json.hpp"

namespace dirforge {

struct TrainConfig {
    LossWeights weights;
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    int epochs_global = 20;
    int epochs_local = 20;
    int steps_per_epoch = 8;
    Index3 patch_size{64, 64, 64};
    Index3 overlap{32, 32, 48};
    int global_downsample_target = 64;
    double max_disp = 10.0;
    int mind_patch_radius = 1;
    std::uint64_t seed = 0;
    int worker_count = 1;

    // Throws DataError when an invariant is violated.
    void validate() const;
    [[nodiscard]] AdamConfig adam() const { return {learning_rate, beta1, beta2, 1e-8}; }
    [[nodiscard]] nlohmann::json to_json() const;
    // Missing keys keep their defaults; unknown keys are rejected.
    static TrainConfig from_json(const nlohmann::json &j);
};

struct VolumePair {
    Volume moving;
    Volume target;
};

// One row of the loss history: means over the steps of an epoch.
struct LossRecord {
    int epoch = 0;
    Stage stage = Stage::global;
    double sim = 0.0;
    double adv_g = 0.0;
    double adv_d = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

struct TrainResult {
    GeneratorParams generator;
    DiscriminatorParams discriminator;
    std::vector<LossRecord> history;
};

using EpochCallback = std::function<void(const LossRecord &)>;

// Alternating discriminator / generator Adam steps on whole volumes that are
// mean-pooled so every dim is <= cfg.global_downsample_target.
TrainResult train_global(const std::vector<VolumePair> &pairs, const TrainConfig &cfg,
                         const EpochCallback &on_epoch = {});
// Same update on patch pairs whose origins are drawn uniformly from the
// patch grid. `pairs` hold (globally deformed, target).
TrainResult train_local(const std::vector<VolumePair> &pairs, const TrainConfig &cfg,
                        const EpochCallback &on_epoch = {});

struct TrainedModels {
    TrainResult global;
    TrainResult local;
};

// train_global, then train_local on the pairs warped by the trained global
// generator.
TrainedModels train_models(const std::vector<VolumePair> &pairs, const TrainConfig &cfg,
                           const EpochCallback &on_epoch = {});

struct StageTiming {
    double global_s = 0.0;
    double local_s = 0.0;
    double compose_s = 0.0;
    double total_s = 0.0;
};

struct RegistrationResult {
    DVF final_dvf;
    Volume deformed;
    DVF global_dvf;
    DVF local_dvf;
    std::size_t patch_count = 0;
    StageTiming timing;
};

// Global generator on the pooled pair, upsampled to full resolution.
DVF predict_global(const Volume &moving, const Volume &target, const GeneratorParams &g, const TrainConfig &cfg);

RegistrationResult register_pair(const Volume &moving, const Volume &target, const GeneratorParams &global_g,
                                 const GeneratorParams &local_g, const TrainConfig &cfg);

// Patch edge lengths actually used on a volume: cfg.patch_size capped by
// the volume dims. Throws DataError if a capped size is not divisible by 8.
Index3 effective_patch_size(const Dims &dims, const TrainConfig &cfg);

void write_loss_csv(const std::filesystem::path &path, const std::vector<LossRecord> &history);
std::string loss_csv_header();

} // namespace dirforge
