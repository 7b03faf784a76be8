#include <cmath>

#include "doctest.h"
#include "dirforge/container.hpp"
#include "dirforge/errors.hpp"
#include "dirforge/losses.hpp"
#include "dirforge/model.hpp"
#include "dirforge/transform.hpp"
#include "support.hpp"

using namespace dirforge;
using namespace dirforge::nn;

namespace {

// Stored once from this implementation: generator seed 0 with a fixed
// sinusoidal head on the 32^3 pair below.
constexpr const char *kGoldenForward = "5b73bf09443c4963be640eb3bd276e9144b6ca0d6d30187cb1b83f92f0bd2a4c";

Tensor hu_tensor(Dims d, std::uint64_t seed) { return Tensor::from_volume(testing::smooth_volume(d, seed, 300.0)); }

void set_head(GeneratorParams &g, float amplitude) {
    auto w = g.params.get("head.w").mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = amplitude * static_cast<float>(std::sin(0.7 * static_cast<double>(i) + 0.3));
    }
}

std::string checksum(const Tensor &t) {
    return sha256_hex(std::span<const char>(reinterpret_cast<const char *>(t.values().data()), t.values().size_bytes()));
}

} // namespace

TEST_CASE("generator layout") {
    const GeneratorParams g = init_generator(Stage::global, 0);
    int convs = 0;
    for (const auto &e : g.params.entries()) {
        if (e.name.size() > 2 && e.name.back() == 'w' && e.name[0] == 'c' && e.name.find("gate") == std::string::npos) {
            ++convs;
        }
    }
    CHECK(convs == 11);
    CHECK(g.params.get("head.w").shape() == Shape{3, 64, 3, 3, 3});
    CHECK(g.params.get("c1.w").shape().c == 2);
    CHECK(g.params.contains("gate1.psi"));
    CHECK(g.params.contains("gate2.psi"));
    const DiscriminatorParams d = init_discriminator(Stage::local, 0);
    CHECK(d.params.get("d4.w").shape().n == 1);
    CHECK(d.params.get("d1.w").shape().c == 1);
    // Both stages come from the same construction.
    const GeneratorParams l = init_generator(Stage::local, 0);
    REQUIRE(l.params.entries().size() == g.params.entries().size());
    for (std::size_t i = 0; i < l.params.entries().size(); ++i) {
        CHECK(l.params.entries()[i].name == g.params.entries()[i].name);
        CHECK(l.params.entries()[i].tensor.shape() == g.params.entries()[i].tensor.shape());
    }
    CHECK(GeneratorArch::from_json(g.arch.to_json()) == g.arch);
    CHECK(DiscriminatorArch::from_json(d.arch.to_json()) == d.arch);
}

TEST_CASE("initialisation is deterministic and He scaled") {
    const GeneratorParams a = init_generator(Stage::global, 0);
    const GeneratorParams b = init_generator(Stage::global, 0);
    CHECK(a.params == b.params);
    CHECK(!(init_generator(Stage::global, 1).params == a.params));
    CHECK(!(init_generator(Stage::local, 0).params == a.params));
    CHECK(init_discriminator(Stage::global, 0).params == init_discriminator(Stage::global, 0).params);

    const DiscriminatorParams disc = init_discriminator(Stage::global, 0);
    for (const ParamSet *ps : {&a.params, &disc.params}) {
        for (const auto &e : ps->entries()) {
            const Shape &s = e.tensor.shape();
            const auto v = e.tensor.values();
            if (e.name == "head.w" || e.name.ends_with(".b") || e.name.ends_with("bias")) {
                for (float x : v) REQUIRE(x == 0.0f);
                continue;
            }
            // Variance estimates on a few dozen draws are too noisy to test.
            if (v.size() < 200) continue;
            const double fan_in = static_cast<double>(s.c) * s.x * s.y * s.z;
            double m2 = 0.0;
            for (float x : v) m2 += static_cast<double>(x) * x;
            const double var = m2 / static_cast<double>(v.size());
            CHECK_MESSAGE(std::abs(var / (2.0 / fan_in) - 1.0) < 0.2, e.name);
        }
    }
}

TEST_CASE("generator output contract") {
    GeneratorParams g = init_generator(Stage::global, 0);
    const Tensor m = hu_tensor({16, 24, 8}, 1), t = hu_tensor({16, 24, 8}, 2);
    const Tensor zero = generator_forward(m, t, g);
    CHECK(zero.shape() == Shape{1, 3, 16, 24, 8});
    for (float v : zero.values()) REQUIRE(v == 0.0f);
    // Identity start: warping by the initial field returns the moving image.
    const Tensor w = warp(m, zero);
    CHECK(std::equal(w.values().begin(), w.values().end(), m.values().begin()));

    set_head(g, 5.0f);
    const Tensor big = generator_forward(m, t, g);
    double mx = 0.0;
    for (float v : big.values()) mx = std::max(mx, static_cast<double>(std::abs(v)));
    CHECK(mx <= g.arch.max_disp * (1.0 + 1e-6));
    CHECK(mx > 1.0);

    CHECK_THROWS(generator_forward(hu_tensor({12, 16, 16}, 1), hu_tensor({12, 16, 16}, 2), g));
    CHECK_THROWS(generator_forward(m, hu_tensor({16, 16, 16}, 2), g));
}

TEST_CASE("generator golden forward") {
    GeneratorParams g = init_generator(Stage::global, 0);
    set_head(g, 0.05f);
    const Tensor m = hu_tensor({32, 32, 32}, 3), t = hu_tensor({32, 32, 32}, 4);
    const Tensor a = generator_forward(m, t, g);
    const Tensor b = generator_forward(m, t, g);
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
    MESSAGE("forward checksum " << checksum(a));
    CHECK(checksum(a) == std::string(kGoldenForward));
}

TEST_CASE("discriminator ranges and gradients") {
    DiscriminatorParams d = init_discriminator(Stage::global, 0);
    const Tensor img = hu_tensor({32, 32, 16}, 5);
    const Tensor out = discriminator_forward(img, d);
    CHECK(out.shape() == Shape{1, 1, 2, 2, 1});
    for (float v : out.values()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    DiscriminatorParams z = d;
    for (auto &e : z.params.entries()) {
        e.tensor = Tensor::zeros(e.tensor.shape(), true);
    }
    const Tensor zo = discriminator_forward(img, z);
    for (float v : zo.values()) CHECK(v == 0.5f);
    CHECK_THROWS(discriminator_forward(hu_tensor({8, 32, 32}, 1), d));

    const Tensor in32 = hu_tensor({32, 32, 32}, 6);
    for (const char *name : {"d1.w", "d2.w", "d3.w", "d4.w", "d4.b"}) {
        Tensor &p = d.params.get(name);
        const auto r = testing::grad_check(p, [&] { return adv_generator_loss(discriminator_forward(in32, d)); }, 20, 9,
                                           1e-3, testing::Pick::largest);
        CHECK_MESSAGE(r.rel_error < 1e-2, std::string(name) << " " << r.rel_error);
    }
}

TEST_CASE("generator loss gradients end to end on a 16^3 pair") {
    GeneratorParams g = init_generator(Stage::local, 3);
    set_head(g, 0.04f);
    // Centre the field near half a voxel so few samples sit on the
    // piecewise-linear kinks of trilinear warping.
    for (auto &b : g.params.get("head.b").mutable_values()) {
        b = 0.05f;
    }
    const DiscriminatorParams d = init_discriminator(Stage::local, 3);
    const Tensor m = hu_tensor({16, 16, 16}, 7), t = hu_tensor({16, 16, 16}, 8);
    const LossWeights w;
    // Numeric side: the same objective with its scalar pieces combined in
    // double, so rounding of the ~200-scale total does not swamp small
    // gradients.
    auto value = [&] {
        NoGradGuard ng;
        const Tensor dvf = generator_forward(m, t, g);
        const Tensor deformed = warp(m, dvf);
        const Tensor md = mind(deformed), mt = mind(t);
        const double sim = 1.0 - static_cast<double>(ncc(md, mt).item()) + w.delta * gradient_difference(md, mt).item();
        return w.alpha * sim + w.beta * adv_generator_loss(discriminator_forward(deformed, d)).item() +
               w.gamma * reg_loss(dvf, w.mu1, w.mu2).item();
    };
    for (const char *name : {"c1.w", "c4.w", "c6.w", "c9.b", "c11.w", "gate1.psi", "gate1.wg", "gate2.wx", "head.w",
                             "head.b"}) {
        Tensor &p = g.params.get(name);
        g.params.zero_grad();
        const Tensor dvf = generator_forward(m, t, g);
        const Tensor deformed = warp(m, dvf);
        total_generator_loss(deformed, t, dvf, discriminator_forward(deformed, d), w).total.backward();
        const std::vector<float> analytic(p.grad().begin(), p.grad().end());
        // Step scaled to the tensor's magnitude: small weights would cross
        // activation kinks, large ones would drown in rounding.
        double ms = 0.0;
        for (float v : p.values()) ms += static_cast<double>(v) * v;
        const double h = std::max(5e-4, 1e-2 * std::sqrt(ms / static_cast<double>(p.values().size())));
        const auto r = testing::compare_gradients(p, analytic, value, 12, 11, h, testing::Pick::largest);
        CHECK_MESSAGE(r.rel_error < 1e-2, std::string(name) << " " << r.rel_error);
    }
}

TEST_CASE("model checkpoints round trip") {
    const auto dir = testing::scratch_dir("model_ckpt");
    const GeneratorParams g = init_generator(Stage::local, 9);
    const DiscriminatorParams d = init_discriminator(Stage::global, 9);
    save_generator(dir / "g", g);
    save_discriminator(dir / "d", d);
    const GeneratorParams g2 = load_generator(dir / "g");
    CHECK(g2.params == g.params);
    CHECK(g2.stage == Stage::local);
    CHECK(g2.arch == g.arch);
    CHECK(load_discriminator(dir / "d").params == d.params);
    CHECK_THROWS_AS(load_generator(dir / "d"), DataError);
    CHECK_THROWS_AS(load_discriminator(dir / "g"), DataError);
    CHECK(stage_from_string(to_string(Stage::global)) == Stage::global);
    CHECK_THROWS(stage_from_string("middle"));
}
