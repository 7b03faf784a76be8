#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dirforge/container.hpp"
#include "dirforge/model.hpp"
#include "dirforge/volume.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace dirforge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

Run run(const fs::path &dir, const std::string &args, const std::string &env = "") {
    const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
    const std::string cmd =
        env + " " + std::string(DIRFORGE_CLI_PATH) + " " + args + " >" + o.string() + " 2>" + e.string();
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
}

void write_text(const fs::path &p, const std::string &s) { std::ofstream(p) << s; }

json read_json(const fs::path &p) { return json::parse(slurp(p)); }

int csv_data_rows(const fs::path &p) {
    std::ifstream in(p);
    std::string line;
    int n = -1;
    while (std::getline(in, line)) {
        if (!line.empty()) ++n;
    }
    return n;
}

const char *kRigid = R"({"dims":[64,64,64],"spacing_mm":[0.9,0.9,2.0],"seed":0,"landmark_count":8,)"
                     R"("deformation":{"type":"rigid_shift","shift_mm":[1.8,0,0]}})";
const char *kBump = R"({"dims":[64,64,64],"spacing_mm":[0.9,0.9,2.0],"seed":0,"landmark_count":8,)"
                    R"("deformation":{"type":"gaussian_bump","peak_mm":3.0,"sigma_mm":12.0}})";
const char *kTiny = R"({"epochs_global":1,"epochs_local":1,"steps_per_epoch":1,"patch_size":[32,32,32],)"
                    R"("overlap":[16,16,16],"global_downsample_target":32})";

// Phantom and checkpoints shared by the flows below.
struct Fixture {
    fs::path dir = testing::scratch_dir("cli");
    fs::path ph = dir / "ph";
    fs::path ck0 = dir / "ck0";
    Fixture() {
        write_text(dir / "rigid.json", kRigid);
        write_text(dir / "zero.json", R"({"epochs_global":0,"epochs_local":0})");
        REQUIRE(run(dir, "phantom --spec " + (dir / "rigid.json").string() + " --out " + ph.string()).code == 0);
        REQUIRE(run(dir, "train --pairs " + (ph / "manifest.json").string() + " --config " +
                             (dir / "zero.json").string() + " --out " + ck0.string())
                    .code == 0);
    }
};

Fixture &fixture() {
    static Fixture f;
    return f;
}

} // namespace

TEST_CASE("usage errors exit with 1") {
    const fs::path dir = testing::scratch_dir("cli_usage");
    CHECK(run(dir, "").code == 1);
    CHECK(run(dir, "bogus").code == 1);
    CHECK(run(dir, "phantom --out x").code == 1);
    CHECK(run(dir, "info --file a --nope").code == 1);
    CHECK(run(dir, "--workers 0 info --file a").code == 1);
    const Run help = run(dir, "--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("register") != std::string::npos);
}

TEST_CASE("phantom command") {
    Fixture &f = fixture();
    const json m = read_json(f.ph / "manifest.json");
    CHECK(m["files"].size() == 6);
    CHECK(m["seed"] == 0);
    CHECK(csv_data_rows(f.ph / "landmarks_moving.csv") == 8);
    CHECK(csv_data_rows(f.ph / "landmarks_target.csv") == 8);
    for (const auto &e : m["files"]) {
        const std::string file = e.contains("payload") ? e["payload"].get<std::string>() : e["file"].get<std::string>();
        CHECK(file_sha256(f.ph / file) == e["sha256"].get<std::string>());
    }

    // Same seed, same bytes.
    const fs::path again = f.dir / "ph_again";
    REQUIRE(run(f.dir, "phantom --spec " + (f.dir / "rigid.json").string() + " --out " + again.string()).code == 0);
    CHECK(slurp(again / "manifest.json") == slurp(f.ph / "manifest.json"));
    CHECK(slurp(again / "moving.bin") == slurp(f.ph / "moving.bin"));

    // A different seed changes the texture.
    const fs::path other = f.dir / "ph_seed";
    REQUIRE(run(f.dir, "phantom --spec " + (f.dir / "rigid.json").string() + " --seed 5 --out " + other.string()).code ==
            0);
    CHECK(read_json(other / "manifest.json")["seed"] == 5);
    CHECK(slurp(other / "target.bin") != slurp(f.ph / "target.bin"));

    // Existing non-empty output directories are refused.
    CHECK(run(f.dir, "phantom --spec " + (f.dir / "rigid.json").string() + " --out " + f.ph.string()).code == 2);

    write_text(f.dir / "bad.json", R"({"dims":[64,64,64],"deformation":{"type":"twist"}})");
    const fs::path bad = f.dir / "ph_bad";
    CHECK(run(f.dir, "phantom --spec " + (f.dir / "bad.json").string() + " --out " + bad.string()).code == 2);
    CHECK(!fs::exists(bad));
    CHECK(!fs::exists(f.dir / "ph_bad.partial"));
    CHECK(run(f.dir, "phantom --spec " + (f.dir / "missing.json").string() + " --out " + bad.string()).code == 2);
}

TEST_CASE("bump phantom truth field peaks at the spec value") {
    Fixture &f = fixture();
    write_text(f.dir / "bump.json", kBump);
    const fs::path out = f.dir / "ph_bump";
    REQUIRE(run(f.dir, "phantom --spec " + (f.dir / "bump.json").string() + " --out " + out.string()).code == 0);
    // The container stores millimetres.
    const RawContainer c = read_container(out / "truth_dvf");
    REQUIRE(c.channels == 3);
    const std::size_t n = c.dims.count();
    double peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = c.data[i], y = c.data[n + i], z = c.data[2 * n + i];
        peak = std::max(peak, std::sqrt(x * x + y * y + z * z));
    }
    CHECK(std::abs(peak - 3.0) <= 1e-3);
}

TEST_CASE("info command") {
    Fixture &f = fixture();
    const json m = read_json(f.ph / "manifest.json");
    Run r = run(f.dir, "info --file " + (f.ph / "moving.json").string());
    CHECK(r.code == 0);
    CHECK(r.out.find("channels: 1") != std::string::npos);
    CHECK(r.out.find("dims: 64 64 64") != std::string::npos);
    CHECK(r.out.find("sha256: " + m["files"][0]["sha256"].get<std::string>()) != std::string::npos);
    r = run(f.dir, "info --file " + (f.ph / "truth_dvf").string());
    CHECK(r.code == 0);
    CHECK(r.out.find("channels: 3") != std::string::npos);
    CHECK(r.out.find("sha256: " + m["files"][2]["sha256"].get<std::string>()) != std::string::npos);

    const fs::path pgm = f.dir / "slice.pgm";
    r = run(f.dir, "info --file " + (f.ph / "target").string() + " --slice z=32 --slice-out " + pgm.string());
    CHECK(r.code == 0);
    const std::string bytes = slurp(pgm);
    CHECK(bytes.rfind("P5\n64 64\n255\n", 0) == 0);
    CHECK(bytes.size() == std::string("P5\n64 64\n255\n").size() + 64 * 64);
    CHECK(run(f.dir, "info --file " + (f.ph / "target").string() + " --slice z=99").code == 2);
    CHECK(run(f.dir, "info --file " + (f.dir / "nothing.json").string()).code == 2);
}

TEST_CASE("train with zero epochs writes the initialization") {
    Fixture &f = fixture();
    for (const char *name : {"global_generator", "global_discriminator", "local_generator", "local_discriminator"}) {
        CHECK(fs::exists(f.ck0 / (std::string(name) + ".json")));
        CHECK(fs::exists(f.ck0 / (std::string(name) + ".bin")));
    }
    CHECK(load_generator(f.ck0 / "global_generator").params == init_generator(Stage::global, 0).params);
    CHECK(load_generator(f.ck0 / "local_generator").params == init_generator(Stage::local, 0).params);
    CHECK(slurp(f.ck0 / "loss.csv") == "epoch,stage,sim,adv_g,adv_d,reg,total\n");
    const json cfg = read_json(f.ck0 / "config.json");
    CHECK(cfg["weights"]["alpha"] == 200.0);
    CHECK(cfg["weights"]["beta"] == 1.0);
    CHECK(cfg["weights"]["gamma"] == 10.0);
    CHECK(cfg["weights"]["delta"] == 5.0);
    CHECK(cfg["weights"]["mu1"] == 1.0);
    CHECK(cfg["weights"]["mu2"] == 0.5);
}

TEST_CASE("train errors") {
    Fixture &f = fixture();
    const std::string pairs = " --pairs " + (f.ph / "manifest.json").string();
    write_text(f.dir / "unknown.json", R"({"epochz":1})");
    CHECK(run(f.dir, "train" + pairs + " --config " + (f.dir / "unknown.json").string() + " --out " +
                         (f.dir / "ck_bad").string())
              .code == 2);
    CHECK(!fs::exists(f.dir / "ck_bad"));
    CHECK(run(f.dir, "train --pairs " + (f.dir / "rigid.json").string() + " --out " + (f.dir / "ck_bad").string())
              .code == 2);

    // Diverging optimisation is an internal invariant violation; nothing is left behind.
    write_text(f.dir / "diverge.json", R"({"learning_rate":1e37,"epochs_global":1,"epochs_local":0,)"
                                       R"("steps_per_epoch":3,"global_downsample_target":32})");
    const Run r =
        run(f.dir, "train" + pairs + " --config " + (f.dir / "diverge.json").string() + " --out " +
                       (f.dir / "ck_nan").string());
    CHECK(r.code == 3);
    CHECK(!fs::exists(f.dir / "ck_nan"));
    CHECK(!fs::exists(f.dir / "ck_nan.partial"));
}

TEST_CASE("train, register and evaluate on a tiny config") {
    Fixture &f = fixture();
    write_text(f.dir / "tiny.json", kTiny);
    const fs::path ck = f.dir / "ck_tiny";
    const Run t = run(f.dir, "train --pairs " + (f.ph / "manifest.json").string() + " --config " +
                                 (f.dir / "tiny.json").string() + " --out " + ck.string());
    REQUIRE(t.code == 0);
    CHECK(csv_data_rows(ck / "loss.csv") == 2);
    CHECK(t.err.find("global epoch 1") != std::string::npos);

    const std::string reg_args =
        "register --moving " + (f.ph / "moving").string() + " --target " + (f.ph / "target").string() + " --ckpt " +
        ck.string() + " --out ";
    REQUIRE(run(f.dir, reg_args + (f.dir / "rg1").string()).code == 0);
    REQUIRE(run(f.dir, reg_args + (f.dir / "rg2").string(), "DIRFORGE_WORKERS=2").code == 0);
    for (const char *name : {"final_dvf.bin", "deformed.bin", "global_dvf.bin", "local_dvf.bin", "final_dvf.json"}) {
        CHECK(slurp(f.dir / "rg1" / name) == slurp(f.dir / "rg2" / name));
    }
    const json timing = read_json(f.dir / "rg2" / "timing.json");
    CHECK(timing["workers"] == 2);
    CHECK(timing["patch_count"] == 27);
    for (const char *k : {"global_s", "local_s", "compose_s", "total_s"}) CHECK(timing[k].get<double>() > 0.0);
    CHECK(timing["total_s"].get<double>() < 60.0);
    CHECK(run(f.dir, reg_args + (f.dir / "rg3").string(), "DIRFORGE_WORKERS=zero").code == 2);

    const Run e = run(f.dir, "evaluate --deformed " + (f.dir / "rg1" / "deformed").string() + " --target " +
                                 (f.ph / "target").string() + " --dvf " + (f.dir / "rg1" / "final_dvf").string() +
                                 " --landmarks-moving " + (f.ph / "landmarks_moving.csv").string() +
                                 " --landmarks-target " + (f.ph / "landmarks_target.csv").string() + " --out " +
                                 (f.dir / "report").string());
    REQUIRE(e.code == 0);
    const json rep = read_json(f.dir / "report.json");
    CHECK(rep["tre_per_landmark"].size() == 8);
    CHECK(rep["mae"].get<double>() >= 0.0);
    CHECK(csv_data_rows(f.dir / "report.csv") == 2);
}

TEST_CASE("register with untrained checkpoints is the identity") {
    Fixture &f = fixture();
    const fs::path out = f.dir / "rg_id";
    REQUIRE(run(f.dir, "register --moving " + (f.ph / "moving").string() + " --target " + (f.ph / "moving").string() +
                           " --ckpt " + f.ck0.string() + " --out " + out.string())
                .code == 0);
    CHECK(slurp(out / "deformed.bin") == slurp(f.ph / "moving.bin"));
    const RawContainer dvf = read_container(out / "final_dvf");
    CHECK(dvf.dims.nx == 64);
    CHECK(dvf.dims.nz == 64);
    for (float v : dvf.data) REQUIRE(v == 0.0f);
    CHECK(read_json(out / "deformed.json")["dims"] == read_json(f.ph / "moving.json")["dims"]);

    // Mismatched dims are data errors.
    Volume small({32, 32, 32}, {0.9, 0.9, 2.0});
    save_volume(f.dir / "small", small);
    CHECK(run(f.dir, "register --moving " + (f.dir / "small").string() + " --target " + (f.ph / "moving").string() +
                         " --ckpt " + f.ck0.string() + " --out " + (f.dir / "rg_bad").string())
              .code == 2);
    CHECK(!fs::exists(f.dir / "rg_bad"));
}

TEST_CASE("evaluate command") {
    Fixture &f = fixture();
    const std::string lms = " --landmarks-moving " + (f.ph / "landmarks_moving.csv").string() +
                            " --landmarks-target " + (f.ph / "landmarks_target.csv").string();

    // The truth field registers the landmarks exactly.
    REQUIRE(run(f.dir, "evaluate --deformed " + (f.ph / "target").string() + " --target " + (f.ph / "target").string() +
                           " --dvf " + (f.ph / "truth_dvf").string() + lms + " --out " + (f.dir / "truth").string())
                .code == 0);
    json r = read_json(f.dir / "truth.json");
    CHECK(r["tre_mean"].get<double>() <= 1e-3);
    CHECK(r["mae"] == 0.0);
    CHECK(r["ncc"] == 1.0);
    CHECK(r["dsc"] == 1.0);
    CHECK(r["fold_fraction"] == 0.0);
    CHECK(r["body_hu"] == -300.0);

    // Coincident landmarks and a zero field.
    save_dvf(f.dir / "zero_dvf", DVF({64, 64, 64}), {0.9, 0.9, 2.0});
    const std::string lmt = (f.ph / "landmarks_target.csv").string();
    REQUIRE(run(f.dir, "evaluate --deformed " + (f.ph / "target").string() + " --target " + (f.ph / "target").string() +
                           " --dvf " + (f.dir / "zero_dvf").string() + " --landmarks-moving " + lmt +
                           " --landmarks-target " + lmt + " --body-hu -200 --bone-hu 450 --out " +
                           (f.dir / "perfect.csv").string())
                .code == 0);
    r = read_json(f.dir / "perfect.json");
    CHECK(r["tre_mean"] == 0.0);
    CHECK(r["mae"] == 0.0);
    CHECK(r["ncc"] == 1.0);
    CHECK(r["dsc"] == 1.0);
    CHECK(r["fold_fraction"] == 0.0);
    CHECK(r["body_hu"] == -200.0);
    CHECK(r["bone_hu"] == 450.0);
    std::ifstream csv(f.dir / "perfect.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "fraction,tre_mean,tre_std,mae,ncc,dsc,jac_min,fold_frac");

    CHECK(run(f.dir, "evaluate --deformed " + (f.dir / "small").string() + " --target " + (f.ph / "target").string() +
                         " --dvf " + (f.ph / "truth_dvf").string() + lms + " --out " + (f.dir / "bad").string())
              .code == 2);
    CHECK(run(f.dir, "evaluate --deformed " + (f.ph / "target").string() + " --target " + (f.ph / "target").string() +
                         " --dvf " + (f.ph / "truth_dvf").string() + " --landmarks-moving " + lmt +
                         " --landmarks-target " + (f.dir / "none.csv").string() + " --out " +
                         (f.dir / "bad").string())
              .code == 2);
}
