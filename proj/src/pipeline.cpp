#include "dirforge/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <thread>

#include "dirforge/container.hpp"
#include "dirforge/errors.hpp"

namespace dirforge {

using nlohmann::json;
using nn::Tensor;

namespace {

const char *const kConfigKeys[] = {"weights",       "learning_rate",   "adam_betas",
                                   "epochs_global", "epochs_local",    "steps_per_epoch",
                                   "patch_size",    "overlap",         "global_downsample_target",
                                   "max_disp",      "mind_patch_radius", "seed",
                                   "worker_count"};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor volume_tensor(const Volume &v) { return Tensor::from_volume(v); }

DVF dvf_from_tensor(const Tensor &t) {
    const Dims d = t.shape().dims();
    return DVF(d, std::vector<float>(t.values().begin(), t.values().end()));
}

// Pooled copy of each pair for the global stage.
std::vector<VolumePair> pool_pairs(const std::vector<VolumePair> &pairs, int target) {
    std::vector<VolumePair> out;
    out.reserve(pairs.size());
    for (const auto &p : pairs) {
        const Index3 f = pooling_factors(p.moving.dims(), target);
        out.push_back({mean_pool(p.moving, f), mean_pool(p.target, f)});
    }
    return out;
}

void check_pairs(const std::vector<VolumePair> &pairs) {
    if (pairs.empty()) {
        throw DataError("training needs at least one volume pair");
    }
    const Dims &d = pairs.front().moving.dims();
    for (const auto &p : pairs) {
        if (!(p.moving.dims() == d) || !(p.target.dims() == d)) {
            throw DataError("all training volumes must share dims " + to_string(d));
        }
    }
}

void check_divisible(const Dims &d, const std::string &what) {
    if (d.nx % 8 != 0 || d.ny % 8 != 0 || d.nz % 8 != 0) {
        throw DataError(what + " dims " + to_string(d) + " must be divisible by 8");
    }
}

// Supplies the (moving, target) tensors for one training step.
using SampleFn = std::function<std::pair<Tensor, Tensor>(std::mt19937_64 &)>;

TrainResult run_stage(Stage stage, int epochs, const SampleFn &sample, const TrainConfig &cfg,
                      const EpochCallback &on_epoch) {
    GeneratorArch garch;
    garch.max_disp = cfg.max_disp;
    TrainResult r{init_generator(stage, cfg.seed, garch), init_discriminator(stage, cfg.seed), {}};
    AdamState gstate;
    AdamState dstate;
    const AdamConfig adam = cfg.adam();
    nn::MindOptions mind_opts;
    mind_opts.patch_radius = cfg.mind_patch_radius;
    std::mt19937_64 rng(cfg.seed * 2 + (stage == Stage::global ? 0 : 1));

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        LossRecord rec;
        rec.epoch = epoch;
        rec.stage = stage;
        for (int step = 0; step < cfg.steps_per_epoch; ++step) {
            const auto [moving, target] = sample(rng);
            Tensor target_mind;
            {
                nn::NoGradGuard ng;
                target_mind = nn::mind(target, mind_opts);
            }
            const Tensor dvf = generator_forward(moving, target, r.generator);
            nn::check_finite(dvf, "generator output");
            const Tensor deformed = nn::warp(moving, dvf);

            // Discriminator step on the current deformed image.
            r.discriminator.params.zero_grad();
            const Tensor d_fake = discriminator_forward(deformed.detach(), r.discriminator);
            const Tensor d_real = discriminator_forward(target, r.discriminator);
            nn::check_finite(d_fake, "discriminator output");
            nn::check_finite(d_real, "discriminator output");
            const Tensor d_loss = adv_discriminator_loss(d_fake, d_real);
            d_loss.backward();
            adam_step(r.discriminator.params, dstate, adam);

            // Generator step against the updated discriminator.
            r.generator.params.zero_grad();
            const Tensor sim = sim_loss_with_target_mind(deformed, target_mind, cfg.weights.delta, mind_opts);
            const Tensor d_gen = discriminator_forward(deformed, r.discriminator);
            nn::check_finite(d_gen, "discriminator output");
            const Tensor adv = adv_generator_loss(d_gen);
            const Tensor reg = reg_loss(dvf, cfg.weights.mu1, cfg.weights.mu2);
            const GeneratorLoss g_loss = assemble_generator_loss(sim, adv, reg, cfg.weights);
            g_loss.total.backward();
            for (const auto &e : r.generator.params.entries()) {
                nn::check_finite(e.tensor, "generator parameter " + e.name);
            }
            adam_step(r.generator.params, gstate, adam);

            rec.sim += sim.item();
            rec.adv_g += adv.item();
            rec.adv_d += d_loss.item();
            rec.reg += reg.item();
            rec.total += g_loss.total.item();
        }
        const double k = cfg.steps_per_epoch > 0 ? 1.0 / cfg.steps_per_epoch : 0.0;
        rec.sim *= k;
        rec.adv_g *= k;
        rec.adv_d *= k;
        rec.reg *= k;
        rec.total *= k;
        r.history.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
    }
    // Gradients are scratch state; leave the parameters clean.
    r.generator.params.zero_grad();
    r.discriminator.params.zero_grad();
    return r;
}

Index3 effective_overlap(const Index3 &patch, const TrainConfig &cfg) {
    Index3 o{};
    for (std::size_t a = 0; a < 3; ++a) {
        o[a] = std::min(cfg.overlap[a], patch[a] - 1);
    }
    return o;
}

Index3 json_index3(const json &j, const char *key) {
    const auto v = j.at(key).get<std::vector<int>>();
    if (v.size() != 3) {
        throw DataError(std::string(key) + " must have 3 entries");
    }
    return {v[0], v[1], v[2]};
}

} // namespace

void TrainConfig::validate() const {
    weights.validate();
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw DataError("learning_rate must be > 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw DataError("adam_betas must lie in [0, 1)");
    }
    if (epochs_global < 0 || epochs_local < 0 || steps_per_epoch < 1) {
        throw DataError("epochs must be >= 0 and steps_per_epoch >= 1");
    }
    for (std::size_t a = 0; a < 3; ++a) {
        if (patch_size[a] < 8 || patch_size[a] % 8 != 0) {
            throw DataError("patch_size entries must be positive multiples of 8");
        }
        if (overlap[a] < 0 || overlap[a] >= patch_size[a]) {
            throw DataError("patch_size must exceed overlap elementwise");
        }
    }
    if (global_downsample_target < 8) {
        throw DataError("global_downsample_target must be >= 8");
    }
    if (!(max_disp > 0.0)) {
        throw DataError("max_disp must be > 0");
    }
    if (mind_patch_radius < 1) {
        throw DataError("mind_patch_radius must be >= 1");
    }
    if (worker_count < 1) {
        throw DataError("worker_count must be >= 1");
    }
}

json TrainConfig::to_json() const {
    return {{"weights", weights.to_json()},
            {"learning_rate", learning_rate},
            {"adam_betas", {beta1, beta2}},
            {"epochs_global", epochs_global},
            {"epochs_local", epochs_local},
            {"steps_per_epoch", steps_per_epoch},
            {"patch_size", patch_size},
            {"overlap", overlap},
            {"global_downsample_target", global_downsample_target},
            {"max_disp", max_disp},
            {"mind_patch_radius", mind_patch_radius},
            {"seed", seed},
            {"worker_count", worker_count}};
}

TrainConfig TrainConfig::from_json(const json &j) {
    if (!j.is_object()) {
        throw DataError("train config must be a JSON object");
    }
    for (const auto &[key, value] : j.items()) {
        if (std::find(std::begin(kConfigKeys), std::end(kConfigKeys), key) == std::end(kConfigKeys)) {
            throw DataError("unknown train config key: " + key);
        }
    }
    TrainConfig c;
    try {
        if (j.contains("weights")) {
            c.weights = LossWeights::from_json(j.at("weights"));
        }
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        if (j.contains("adam_betas")) {
            const auto b = j.at("adam_betas").get<std::vector<double>>();
            if (b.size() != 2) {
                throw DataError("adam_betas must have 2 entries");
            }
            c.beta1 = b[0];
            c.beta2 = b[1];
        }
        c.epochs_global = j.value("epochs_global", c.epochs_global);
        c.epochs_local = j.value("epochs_local", c.epochs_local);
        c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
        if (j.contains("patch_size")) {
            c.patch_size = json_index3(j, "patch_size");
        }
        if (j.contains("overlap")) {
            c.overlap = json_index3(j, "overlap");
        }
        c.global_downsample_target = j.value("global_downsample_target", c.global_downsample_target);
        c.max_disp = j.value("max_disp", c.max_disp);
        c.mind_patch_radius = j.value("mind_patch_radius", c.mind_patch_radius);
        c.seed = j.value("seed", c.seed);
        c.worker_count = j.value("worker_count", c.worker_count);
    } catch (const json::exception &e) {
        throw DataError("invalid train config: " + std::string(e.what()));
    }
    c.validate();
    return c;
}

Index3 effective_patch_size(const Dims &dims, const TrainConfig &cfg) {
    Index3 p{};
    for (int a = 0; a < 3; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        p[ua] = std::min(cfg.patch_size[ua], dims[a]);
        if (p[ua] % 8 != 0) {
            throw DataError("patch edge " + std::to_string(p[ua]) + " along axis " + std::to_string(a) +
                            " is not divisible by 8");
        }
    }
    return p;
}

TrainResult train_global(const std::vector<VolumePair> &pairs, const TrainConfig &cfg, const EpochCallback &on_epoch) {
    cfg.validate();
    check_pairs(pairs);
    const auto pooled = pool_pairs(pairs, cfg.global_downsample_target);
    check_divisible(pooled.front().moving.dims(), "pooled volume");
    std::vector<std::pair<Tensor, Tensor>> tensors;
    for (const auto &p : pooled) {
        tensors.emplace_back(volume_tensor(p.moving), volume_tensor(p.target));
    }
    const SampleFn sample = [&](std::mt19937_64 &rng) {
        if (tensors.size() == 1) {
            return tensors.front();
        }
        std::uniform_int_distribution<std::size_t> pick(0, tensors.size() - 1);
        return tensors[pick(rng)];
    };
    return run_stage(Stage::global, cfg.epochs_global, sample, cfg, on_epoch);
}

TrainResult train_local(const std::vector<VolumePair> &pairs, const TrainConfig &cfg, const EpochCallback &on_epoch) {
    cfg.validate();
    check_pairs(pairs);
    const Dims dims = pairs.front().moving.dims();
    const Index3 patch = effective_patch_size(dims, cfg);
    const PatchGrid grid = build_patch_grid(dims, patch, effective_overlap(patch, cfg));
    const SampleFn sample = [&](std::mt19937_64 &rng) {
        std::size_t pi = 0;
        if (pairs.size() > 1) {
            std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
            pi = pick(rng);
        }
        std::uniform_int_distribution<std::size_t> pick_patch(0, grid.size() - 1);
        const Index3 &start = grid.starts[pick_patch(rng)];
        const auto &p = pairs[pi];
        return std::pair{volume_tensor(extract_patch(p.moving, start, patch)),
                         volume_tensor(extract_patch(p.target, start, patch))};
    };
    return run_stage(Stage::local, cfg.epochs_local, sample, cfg, on_epoch);
}

DVF predict_global(const Volume &moving, const Volume &target, const GeneratorParams &g, const TrainConfig &cfg) {
    if (!(moving.dims() == target.dims())) {
        throw DataError("moving " + to_string(moving.dims()) + " and target " + to_string(target.dims()) +
                        " dims differ");
    }
    const Index3 f = pooling_factors(moving.dims(), cfg.global_downsample_target);
    const Volume pm = mean_pool(moving, f);
    const Volume pt = mean_pool(target, f);
    check_divisible(pm.dims(), "pooled volume");
    nn::NoGradGuard ng;
    const Tensor coarse = generator_forward(volume_tensor(pm), volume_tensor(pt), g);
    return upsample_dvf(dvf_from_tensor(coarse), moving.dims());
}

TrainedModels train_models(const std::vector<VolumePair> &pairs, const TrainConfig &cfg, const EpochCallback &on_epoch) {
    TrainedModels m;
    m.global = train_global(pairs, cfg, on_epoch);
    std::vector<VolumePair> local_pairs;
    for (const auto &p : pairs) {
        const DVF g = predict_global(p.moving, p.target, m.global.generator, cfg);
        local_pairs.push_back({warp(p.moving, g), p.target});
    }
    m.local = train_local(local_pairs, cfg, on_epoch);
    return m;
}

RegistrationResult register_pair(const Volume &moving, const Volume &target, const GeneratorParams &global_g,
                                 const GeneratorParams &local_g, const TrainConfig &cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    RegistrationResult r;
    r.global_dvf = predict_global(moving, target, global_g, cfg);
    const Volume global_deformed = warp(moving, r.global_dvf);
    r.timing.global_s = seconds_since(t0);

    const auto t1 = std::chrono::steady_clock::now();
    const Dims dims = moving.dims();
    const Index3 patch = effective_patch_size(dims, cfg);
    const PatchGrid grid = build_patch_grid(dims, patch, effective_overlap(patch, cfg));
    std::vector<DVF> patches(grid.size());
    auto run_patch = [&](std::size_t i) {
        nn::NoGradGuard ng;
        const Index3 &s = grid.starts[i];
        const Tensor out = generator_forward(volume_tensor(extract_patch(global_deformed, s, patch)),
                                             volume_tensor(extract_patch(target, s, patch)), local_g);
        patches[i] = dvf_from_tensor(out);
    };
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.worker_count), grid.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < grid.size(); ++i) {
            run_patch(i);
        }
    } else {
        // Static round-robin assignment; results land in grid order.
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < grid.size(); i += workers) {
                        run_patch(i);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto &t : pool) {
            t.join();
        }
        for (const auto &e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }
    r.local_dvf = fuse_patches(patches, grid);
    r.patch_count = grid.size();
    r.timing.local_s = seconds_since(t1);

    const auto t2 = std::chrono::steady_clock::now();
    r.final_dvf = compose(r.global_dvf, r.local_dvf);
    r.deformed = warp(moving, r.final_dvf);
    r.timing.compose_s = seconds_since(t2);
    r.timing.total_s = seconds_since(t0);
    return r;
}

std::string loss_csv_header() { return "epoch,stage,sim,adv_g,adv_d,reg,total"; }

void write_loss_csv(const std::filesystem::path &path, const std::vector<LossRecord> &history) {
    std::ostringstream out;
    out << loss_csv_header() << "\n";
    for (const auto &r : history) {
        out << r.epoch << "," << to_string(r.stage) << "," << format_double(r.sim) << "," << format_double(r.adv_g)
            << "," << format_double(r.adv_d) << "," << format_double(r.reg) << "," << format_double(r.total) << "\n";
    }
    atomic_write_text(path, out.str());
}

} // namespace dirforge
