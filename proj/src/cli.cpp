#include "dirforge/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dirforge/container.hpp"
#include "dirforge/errors.hpp"
#include "dirforge/metrics.hpp"
#include "dirforge/phantom.hpp"
#include "dirforge/pipeline.hpp"
#include "json.hpp"

namespace dirforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception &e) {
        throw DataError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

int resolve_workers(int flag) {
    if (flag > 0) {
        return flag;
    }
    if (const char *env = std::getenv("DIRFORGE_WORKERS")) {
        try {
            const int v = std::stoi(env);
            if (v >= 1) {
                return v;
            }
        } catch (const std::exception &) {
        }
        throw DataError("DIRFORGE_WORKERS must be a positive integer");
    }
    return 1;
}

// Writes into `<out>.partial` and renames to `out` only when `body` succeeds.
template <class F>
void with_staging_dir(const fs::path &out, F &&body) {
    if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out))) {
        throw DataError("output directory " + out.string() + " exists and is not empty");
    }
    const fs::path staging = fs::path(out.string() + ".partial");
    std::error_code ec;
    fs::remove_all(staging, ec);
    if (!fs::create_directories(staging, ec) && ec) {
        throw DataError("cannot create " + staging.string());
    }
    try {
        body(staging);
    } catch (...) {
        fs::remove_all(staging, ec);
        throw;
    }
    if (fs::exists(out)) {
        fs::remove(out, ec);
    }
    fs::rename(staging, out, ec);
    if (ec) {
        fs::remove_all(staging, ec);
        throw DataError("cannot move outputs into " + out.string());
    }
}

std::string payload_sha(const fs::path &container) {
    return file_sha256(fs::path(container_base(container).string() + ".bin"));
}

json container_entry(const std::string &name, const fs::path &dir) {
    return {{"name", name},
            {"header", name + ".json"},
            {"payload", name + ".bin"},
            {"sha256", payload_sha(dir / name)}};
}

json file_entry(const std::string &name, const std::string &file, const fs::path &dir) {
    return {{"name", name}, {"file", file}, {"sha256", file_sha256(dir / file)}};
}

int cmd_phantom(const fs::path &spec_path, const fs::path &out_dir, const std::optional<std::uint64_t> &seed,
                std::ostream &out) {
    PhantomSpec spec = phantom_spec_from_json(read_json_file(spec_path));
    if (seed) {
        spec.seed = *seed;
    }
    spec.validate();
    const Phantom ph = make_phantom(spec);
    with_staging_dir(out_dir, [&](const fs::path &dir) {
        save_volume(dir / "moving", ph.moving);
        save_volume(dir / "target", ph.target);
        save_dvf(dir / "truth_dvf", ph.truth_dvf, spec.spacing);
        write_landmarks_csv(dir / "landmarks_moving.csv", ph.landmarks_moving);
        write_landmarks_csv(dir / "landmarks_target.csv", ph.landmarks_target);
        atomic_write_text(dir / "spec.json", phantom_spec_to_json(spec).dump(2) + "\n");
        json files = json::array({container_entry("moving", dir), container_entry("target", dir),
                                  container_entry("truth_dvf", dir),
                                  file_entry("landmarks_moving", "landmarks_moving.csv", dir),
                                  file_entry("landmarks_target", "landmarks_target.csv", dir),
                                  file_entry("spec", "spec.json", dir)});
        const json manifest{{"kind", "phantom"}, {"seed", spec.seed}, {"files", files}};
        atomic_write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    });
    out << "wrote phantom to " << out_dir.string() << "\n";
    return kExitOk;
}

// Accepts a phantom manifest (one pair) or {"pairs": [{"moving", "target"}]}.
std::vector<VolumePair> load_pairs(const fs::path &manifest_path) {
    const json m = read_json_file(manifest_path);
    const fs::path base = manifest_path.parent_path();
    std::vector<VolumePair> pairs;
    try {
        if (m.contains("pairs")) {
            for (const auto &p : m.at("pairs")) {
                pairs.push_back({load_volume(base / p.at("moving").get<std::string>()),
                                 load_volume(base / p.at("target").get<std::string>())});
            }
        } else if (m.contains("files")) {
            fs::path mv, tg;
            for (const auto &f : m.at("files")) {
                const auto name = f.at("name").get<std::string>();
                if (name == "moving") {
                    mv = base / f.at("header").get<std::string>();
                } else if (name == "target") {
                    tg = base / f.at("header").get<std::string>();
                }
            }
            if (mv.empty() || tg.empty()) {
                throw DataError("manifest lacks moving/target entries");
            }
            pairs.push_back({load_volume(mv), load_volume(tg)});
        } else {
            throw DataError("pairs manifest needs a \"pairs\" or \"files\" list");
        }
    } catch (const json::exception &e) {
        throw DataError("invalid pairs manifest: " + std::string(e.what()));
    }
    if (pairs.empty()) {
        throw DataError("pairs manifest lists no pairs");
    }
    return pairs;
}

std::string format_record(const LossRecord &r) {
    std::ostringstream s;
    s << to_string(r.stage) << " epoch " << r.epoch << " sim " << r.sim << " adv_g " << r.adv_g << " adv_d " << r.adv_d
      << " reg " << r.reg << " total " << r.total;
    return s.str();
}

int cmd_train(const fs::path &pairs_path, const std::string &config_path, const fs::path &out_dir, int workers,
              const std::optional<std::uint64_t> &seed, bool quiet, std::ostream &out, std::ostream &err) {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::from_json(read_json_file(config_path));
    if (seed) {
        cfg.seed = *seed;
    }
    cfg.worker_count = workers;
    cfg.validate();
    const auto pairs = load_pairs(pairs_path);
    const EpochCallback log = [&](const LossRecord &r) {
        if (!quiet) {
            err << format_record(r) << std::endl;
        }
    };
    with_staging_dir(out_dir, [&](const fs::path &dir) {
        atomic_write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
        const TrainedModels models = train_models(pairs, cfg, log);
        const TrainResult &global = models.global;
        const TrainResult &local = models.local;
        save_generator(dir / "global_generator", global.generator);
        save_discriminator(dir / "global_discriminator", global.discriminator);
        save_generator(dir / "local_generator", local.generator);
        save_discriminator(dir / "local_discriminator", local.discriminator);
        const json arch{{"generator", global.generator.arch.to_json()},
                        {"discriminator", global.discriminator.arch.to_json()}};
        atomic_write_text(dir / "arch.json", arch.dump(2) + "\n");
        auto history = global.history;
        history.insert(history.end(), local.history.begin(), local.history.end());
        write_loss_csv(dir / "loss.csv", history);
    });
    out << "wrote checkpoints to " << out_dir.string() << "\n";
    return kExitOk;
}

int cmd_register(const fs::path &moving_path, const fs::path &target_path, const fs::path &ckpt, const fs::path &out_dir,
                 int workers, std::ostream &out) {
    const Volume moving = load_volume(moving_path);
    const Volume target = load_volume(target_path);
    if (!(moving.dims() == target.dims())) {
        throw DataError("moving and target dims differ");
    }
    TrainConfig cfg;
    if (fs::exists(ckpt / "config.json")) {
        cfg = TrainConfig::from_json(read_json_file(ckpt / "config.json"));
    }
    cfg.worker_count = workers;
    const GeneratorParams gg = load_generator(ckpt / "global_generator");
    const GeneratorParams lg = load_generator(ckpt / "local_generator");
    const RegistrationResult r = register_pair(moving, target, gg, lg, cfg);
    with_staging_dir(out_dir, [&](const fs::path &dir) {
        save_dvf(dir / "final_dvf", r.final_dvf, moving.spacing());
        save_volume(dir / "deformed", r.deformed);
        save_dvf(dir / "global_dvf", r.global_dvf, moving.spacing());
        save_dvf(dir / "local_dvf", r.local_dvf, moving.spacing());
        const json timing{{"global_s", r.timing.global_s},
                          {"local_s", r.timing.local_s},
                          {"compose_s", r.timing.compose_s},
                          {"total_s", r.timing.total_s},
                          {"patch_count", r.patch_count},
                          {"workers", workers}};
        atomic_write_text(dir / "timing.json", timing.dump(2) + "\n");
    });
    out << "registered in " << r.timing.total_s << " s (" << r.patch_count << " patches)\n";
    return kExitOk;
}

int cmd_evaluate(const fs::path &deformed_path, const fs::path &target_path, const fs::path &dvf_path,
                 const fs::path &lm_moving, const fs::path &lm_target, const fs::path &out_base, double body_hu,
                 double bone_hu, const std::string &fraction, std::ostream &out) {
    const Volume deformed = load_volume(deformed_path);
    const Volume target = load_volume(target_path);
    const LoadedDvf dvf = load_dvf(dvf_path);
    const LandmarkSet lmm = read_landmarks_csv(lm_moving);
    const LandmarkSet lmt = read_landmarks_csv(lm_target);
    MetricReport r = evaluate({deformed, target, dvf.dvf, lmm, lmt, body_hu, bone_hu});
    r.fraction = fraction;
    fs::path base = out_base;
    if (base.extension() == ".csv" || base.extension() == ".json") {
        base.replace_extension();
    }
    if (base.has_parent_path()) {
        fs::create_directories(base.parent_path());
    }
    atomic_write_text(fs::path(base.string() + ".csv"), report_csv({r}));
    atomic_write_text(fs::path(base.string() + ".json"), r.to_json().dump(2) + "\n");
    out << "tre_mean " << r.tre_mean << " mm, mae " << r.mae << " HU, ncc " << r.ncc << ", dsc " << r.dsc
        << ", fold_fraction " << r.fold_fraction << "\n";
    return kExitOk;
}

void write_pgm_slice(const RawContainer &c, int z, const fs::path &path) {
    if (z < 0 || z >= c.dims.nz) {
        throw DataError("slice z=" + std::to_string(z) + " outside [0, " + std::to_string(c.dims.nz) + ")");
    }
    const std::size_t plane = static_cast<std::size_t>(c.dims.nx) * c.dims.ny;
    const float *src = c.data.data() + static_cast<std::size_t>(z) * plane;
    const auto [mn, mx] = std::minmax_element(src, src + plane);
    const double lo = *mn;
    const double span = std::max(static_cast<double>(*mx) - lo, 1e-12);
    std::string bytes = "P5\n" + std::to_string(c.dims.nx) + " " + std::to_string(c.dims.ny) + "\n255\n";
    for (std::size_t i = 0; i < plane; ++i) {
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * (src[i] - lo) / span))));
    }
    atomic_write_text(path, bytes);
}

int cmd_info(const fs::path &file, const std::string &slice, const std::string &slice_out, std::ostream &out) {
    const RawContainer c = read_container(file);
    const auto [mn, mx] = std::minmax_element(c.data.begin(), c.data.end());
    out << "dims: " << c.dims.nx << " " << c.dims.ny << " " << c.dims.nz << "\n";
    out << "spacing_mm: " << format_double(c.spacing[0]) << " " << format_double(c.spacing[1]) << " "
        << format_double(c.spacing[2]) << "\n";
    out << "channels: " << c.channels << "\n";
    out << "min: " << format_double(*mn) << "\n";
    out << "max: " << format_double(*mx) << "\n";
    out << "sha256: " << payload_sha(file) << "\n";
    if (!slice.empty()) {
        if (slice.rfind("z=", 0) != 0) {
            throw DataError("--slice expects z=N");
        }
        int z = 0;
        try {
            z = std::stoi(slice.substr(2));
        } catch (const std::exception &) {
            throw DataError("--slice expects z=N");
        }
        const fs::path dest = slice_out.empty() ? fs::path(container_base(file).string() + "_z" + std::to_string(z) + ".pgm")
                                                : fs::path(slice_out);
        write_pgm_slice(c, z, dest);
        out << "slice: " << dest.string() << "\n";
    }
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"dirforge: unsupervised multi-scale deformable registration"};
    app.require_subcommand(1);
    int workers = 0;
    app.add_option("--workers", workers, "Worker threads (falls back to DIRFORGE_WORKERS, then 1)")
        ->check(CLI::PositiveNumber);

    std::string spec, out_dir;
    std::optional<std::uint64_t> seed;
    auto *phantom = app.add_subcommand("phantom", "Generate a synthetic phantom pair with ground truth");
    phantom->add_option("--spec", spec, "PhantomSpec JSON")->required();
    phantom->add_option("--out", out_dir, "Output directory")->required();
    phantom->add_option("--seed", seed, "Override the spec seed");

    std::string pairs, config, ckpt_out;
    bool quiet = false;
    auto *train = app.add_subcommand("train", "Train the global then the local stage");
    train->add_option("--pairs", pairs, "Pairs manifest JSON")->required();
    train->add_option("--config", config, "TrainConfig JSON (defaults when omitted)");
    train->add_option("--out", ckpt_out, "Checkpoint directory")->required();
    train->add_option("--seed", seed, "Override the config seed");
    train->add_flag("--quiet", quiet, "Do not log per-epoch losses");

    std::string moving, target, ckpt, reg_out;
    auto *reg = app.add_subcommand("register", "Register a moving volume to a target");
    reg->add_option("--moving", moving, "Moving volume container")->required();
    reg->add_option("--target", target, "Target volume container")->required();
    reg->add_option("--ckpt", ckpt, "Checkpoint directory from train")->required();
    reg->add_option("--out", reg_out, "Output directory")->required();

    std::string deformed, dvf, lm_moving, lm_target, report, fraction = "1";
    double body_hu = kBodyThresholdHu, bone_hu = kBoneThresholdHu;
    auto *eval = app.add_subcommand("evaluate", "Compute TRE, MAE, NCC, DSC and fold statistics");
    eval->add_option("--deformed", deformed, "Deformed volume container")->required();
    eval->add_option("--target", target, "Target volume container")->required();
    eval->add_option("--dvf", dvf, "DVF container (mm)")->required();
    eval->add_option("--landmarks-moving", lm_moving, "Moving landmarks CSV")->required();
    eval->add_option("--landmarks-target", lm_target, "Target landmarks CSV")->required();
    eval->add_option("--out", report, "Report base path (.csv and .json are written)")->required();
    eval->add_option("--body-hu", body_hu, "Body mask threshold in HU");
    eval->add_option("--bone-hu", bone_hu, "Bone mask threshold in HU");
    eval->add_option("--fraction", fraction, "Label of the report row");

    std::string file, slice, slice_out;
    auto *info = app.add_subcommand("info", "Summarise a container file");
    info->add_option("--file", file, "Container (.json, .bin or base name)")->required();
    info->add_option("--slice", slice, "Also write an axial slice as PGM, e.g. z=32");
    info->add_option("--slice-out", slice_out, "PGM destination");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError &e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    try {
        const int w = resolve_workers(workers);
        if (*phantom) {
            return cmd_phantom(spec, out_dir, seed, out);
        }
        if (*train) {
            return cmd_train(pairs, config, ckpt_out, w, seed, quiet, out, err);
        }
        if (*reg) {
            return cmd_register(moving, target, ckpt, reg_out, w, out);
        }
        if (*eval) {
            return cmd_evaluate(deformed, target, dvf, lm_moving, lm_target, report, body_hu, bone_hu, fraction, out);
        }
        return cmd_info(file, slice, slice_out, out);
    } catch (const DataError &e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const InvariantError &e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInvariant;
    } catch (const std::invalid_argument &e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error &e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception &e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInvariant;
    }
}

} // namespace dirforge
