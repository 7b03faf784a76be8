#include "dirforge/model.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "dirforge/errors.hpp"

namespace dirforge {

using nlohmann::json;
using nn::Shape;
using nn::Tensor;

namespace {

struct ConvLayer {
    std::string name;
    int in;
    int out;
    int kernel;
    int stride;
};

struct GateLayer {
    std::string name;
    int x_channels;
    int g_channels;
    int inter;
};

std::vector<ConvLayer> generator_convs(const GeneratorArch &a) {
    const auto [w0, w1, w2, w3] = a.widths;
    return {
        {"c1", 2, w0, 3, 1},       {"c2", w0, w1, 3, 1},  {"c3", w1, w1, 3, 1},  {"c4", w1, w1, 3, 1},
        {"c5", w1, w2, 3, 1},      {"c6", w2 + w1, w2, 3, 1}, {"c7", w2, w2, 3, 1}, {"c8", w2, w3, 3, 1},
        {"c9", w3 + w2, w3, 3, 1}, {"c10", w3, w3, 3, 1}, {"c11", w3, w3, 3, 1}, {"head", w3, 3, 3, 1},
    };
}

std::vector<GateLayer> generator_gates(const GeneratorArch &a) {
    return {{"gate1", a.widths[1], a.widths[2], std::max(1, a.widths[1] / 2)},
            {"gate2", a.widths[2], a.widths[3], std::max(1, a.widths[2] / 2)}};
}

std::vector<ConvLayer> discriminator_convs(const DiscriminatorArch &a) {
    return {{"d1", 1, a.widths[0], 3, 2},
            {"d2", a.widths[0], a.widths[1], 3, 2},
            {"d3", a.widths[1], a.widths[2], 3, 2},
            {"d4", a.widths[2], 1, 3, 2}};
}

json conv_table(const std::vector<ConvLayer> &convs) {
    json t = json::array();
    for (const auto &c : convs) {
        t.push_back({{"name", c.name}, {"in", c.in}, {"out", c.out}, {"kernel", c.kernel}, {"stride", c.stride}});
    }
    return t;
}

class Initializer {
public:
    Initializer(std::uint64_t seed, Stage stage, int role) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(role)};
        rng_.seed(seq);
    }

    std::vector<float> he_uniform(std::size_t count, int fan_in) {
        const float bound = static_cast<float>(std::sqrt(6.0 / fan_in));
        std::uniform_real_distribution<float> dist(-bound, bound);
        std::vector<float> v(count);
        for (auto &x : v) {
            x = dist(rng_);
        }
        return v;
    }

private:
    std::mt19937_64 rng_;
};

void add_conv(nn::ParamSet &ps, Initializer &init, const ConvLayer &c, bool zero) {
    const Shape ws{c.out, c.in, c.kernel, c.kernel, c.kernel};
    const int fan_in = c.in * c.kernel * c.kernel * c.kernel;
    ps.add(c.name + ".w", ws, zero ? std::vector<float>(ws.numel(), 0.0f) : init.he_uniform(ws.numel(), fan_in));
    ps.add(c.name + ".b", Shape{1, c.out}, std::vector<float>(static_cast<std::size_t>(c.out), 0.0f));
}

void add_gate(nn::ParamSet &ps, Initializer &init, const GateLayer &g) {
    ps.add(g.name + ".wx", Shape{g.inter, g.x_channels}, init.he_uniform(static_cast<std::size_t>(g.inter) * g.x_channels, g.x_channels));
    ps.add(g.name + ".wg", Shape{g.inter, g.g_channels}, init.he_uniform(static_cast<std::size_t>(g.inter) * g.g_channels, g.g_channels));
    ps.add(g.name + ".bias", Shape{1, g.inter}, std::vector<float>(static_cast<std::size_t>(g.inter), 0.0f));
    ps.add(g.name + ".psi", Shape{1, g.inter}, init.he_uniform(static_cast<std::size_t>(g.inter), g.inter));
    ps.add(g.name + ".psi_bias", Shape{1, 1}, {0.0f});
}

Tensor conv(const Tensor &x, const nn::ParamSet &ps, const ConvLayer &c) {
    nn::ConvSpec spec{c.in, c.out, {c.kernel, c.kernel, c.kernel}, c.stride, c.kernel / 2};
    return nn::conv3d(x, ps.get(c.name + ".w"), ps.get(c.name + ".b"), spec);
}

// Gate kernels are 1x1x1, so Shape{out, in} already has the conv layout.
nn::AttentionGateParams gate_params(const nn::ParamSet &ps, const GateLayer &g) {
    return {ps.get(g.name + ".wx"), ps.get(g.name + ".wg"), ps.get(g.name + ".bias"), ps.get(g.name + ".psi"),
            ps.get(g.name + ".psi_bias")};
}

// Checks that `loaded` has exactly the names and shapes of `reference`.
void check_layout(const nn::ParamSet &loaded, const nn::ParamSet &reference, const std::string &what) {
    const auto &a = loaded.entries();
    const auto &b = reference.entries();
    if (a.size() != b.size()) {
        throw DataError(what + " checkpoint has " + std::to_string(a.size()) + " tensors, architecture expects " +
                        std::to_string(b.size()));
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || !(a[i].tensor.shape() == b[i].tensor.shape())) {
            throw DataError(what + " checkpoint tensor " + a[i].name + " does not match the architecture");
        }
    }
}

constexpr int kGeneratorRole = 1;
constexpr int kDiscriminatorRole = 2;

} // namespace

std::string to_string(Stage s) { return s == Stage::global ? "global" : "local"; }

Stage stage_from_string(const std::string &s) {
    if (s == "global") {
        return Stage::global;
    }
    if (s == "local") {
        return Stage::local;
    }
    throw DataError("unknown stage: " + s);
}

json GeneratorArch::to_json() const {
    json gates = json::array();
    for (const auto &g : generator_gates(*this)) {
        gates.push_back({{"name", g.name}, {"x_channels", g.x_channels}, {"g_channels", g.g_channels}, {"inter", g.inter}});
    }
    return {{"widths", widths},
            {"max_disp", max_disp},
            {"leaky_slope", leaky_slope},
            {"input_scale", input_scale},
            {"pool_after_blocks", {1, 2, 3}},
            {"convs", conv_table(generator_convs(*this))},
            {"attention_gates", gates},
            {"upsample", "trilinear x8 with displacement rescale"}};
}

GeneratorArch GeneratorArch::from_json(const json &j) {
    GeneratorArch a;
    a.widths = j.value("widths", a.widths);
    a.max_disp = j.value("max_disp", a.max_disp);
    a.leaky_slope = j.value("leaky_slope", a.leaky_slope);
    a.input_scale = j.value("input_scale", a.input_scale);
    for (int w : a.widths) {
        if (w < 1) {
            throw DataError("generator widths must be >= 1");
        }
    }
    if (!(a.max_disp > 0.0)) {
        throw DataError("max_disp must be > 0");
    }
    return a;
}

json DiscriminatorArch::to_json() const {
    return {{"widths", widths},
            {"leaky_slope", leaky_slope},
            {"input_scale", input_scale},
            {"convs", conv_table(discriminator_convs(*this))},
            {"output", "sigmoid"}};
}

DiscriminatorArch DiscriminatorArch::from_json(const json &j) {
    DiscriminatorArch a;
    a.widths = j.value("widths", a.widths);
    a.leaky_slope = j.value("leaky_slope", a.leaky_slope);
    a.input_scale = j.value("input_scale", a.input_scale);
    for (int w : a.widths) {
        if (w < 1) {
            throw DataError("discriminator widths must be >= 1");
        }
    }
    return a;
}

GeneratorParams init_generator(Stage stage, std::uint64_t seed, const GeneratorArch &arch) {
    GeneratorParams g;
    g.stage = stage;
    g.arch = arch;
    Initializer init(seed, stage, kGeneratorRole);
    for (const auto &c : generator_convs(arch)) {
        add_conv(g.params, init, c, c.name == "head");
    }
    for (const auto &gate : generator_gates(arch)) {
        add_gate(g.params, init, gate);
    }
    return g;
}

DiscriminatorParams init_discriminator(Stage stage, std::uint64_t seed, const DiscriminatorArch &arch) {
    DiscriminatorParams d;
    d.stage = stage;
    d.arch = arch;
    Initializer init(seed, stage, kDiscriminatorRole);
    for (const auto &c : discriminator_convs(arch)) {
        add_conv(d.params, init, c, false);
    }
    return d;
}

Tensor generator_forward(const Tensor &moving, const Tensor &target, const GeneratorParams &g) {
    const Shape &ms = moving.shape();
    if (!(ms == target.shape()) || ms.n != 1 || ms.c != 1) {
        throw std::invalid_argument("generator: moving " + nn::to_string(ms) + " and target " +
                                    nn::to_string(target.shape()) + " must be matching single-channel volumes");
    }
    if (ms.x % 8 != 0 || ms.y % 8 != 0 || ms.z % 8 != 0) {
        throw std::invalid_argument("generator: spatial dims must be divisible by 8, got " + nn::to_string(ms));
    }
    const auto convs = generator_convs(g.arch);
    const auto gates = generator_gates(g.arch);
    const auto &ps = g.params;
    const float slope = g.arch.leaky_slope;
    auto layer = [&](const Tensor &x, int i) { return nn::leaky_relu(conv(x, ps, convs[static_cast<std::size_t>(i)]), slope); };

    const Tensor in = nn::scale(nn::concat_channels(moving, target), g.arch.input_scale);
    // Block 1, full resolution.
    const Tensor x1 = layer(in, 0);
    // Block 2, 1/2.
    Tensor x2 = layer(nn::maxpool3d(x1), 1);
    x2 = layer(x2, 2);
    x2 = layer(x2, 3);
    // Block 3, 1/4: the first conv also gates the block-2 skip.
    const Tensor g3 = layer(nn::maxpool3d(x2), 4);
    const Tensor a2 = nn::attention_gate(x2, g3, gate_params(ps, gates[0]));
    Tensor x3 = layer(nn::concat_channels(g3, nn::maxpool3d(a2)), 5);
    x3 = layer(x3, 6);
    // Block 4, 1/8.
    const Tensor g4 = layer(nn::maxpool3d(x3), 7);
    const Tensor a3 = nn::attention_gate(x3, g4, gate_params(ps, gates[1]));
    Tensor x4 = layer(nn::concat_channels(g4, nn::maxpool3d(a3)), 8);
    x4 = layer(x4, 9);
    x4 = layer(x4, 10);
    // Bounded head at 1/8; upsampling multiplies displacements by 8.
    const Tensor coarse = nn::scale(nn::tanh(conv(x4, ps, convs[11])), static_cast<float>(g.arch.max_disp / 8.0));
    return nn::upsample_dvf(coarse, ms.dims());
}

Tensor discriminator_forward(const Tensor &image, const DiscriminatorParams &d) {
    const Shape &s = image.shape();
    if (s.n != 1 || s.c != 1) {
        throw std::invalid_argument("discriminator: expected a single-channel image, got " + nn::to_string(s));
    }
    if (s.x < 16 || s.y < 16 || s.z < 16) {
        throw std::invalid_argument("discriminator: input " + nn::to_string(s) + " too small for four stride-2 layers");
    }
    const auto convs = discriminator_convs(d.arch);
    Tensor x = nn::scale(image, d.arch.input_scale);
    for (std::size_t i = 0; i < convs.size(); ++i) {
        x = conv(x, d.params, convs[i]);
        x = i + 1 < convs.size() ? nn::leaky_relu(x, d.arch.leaky_slope) : nn::sigmoid(x);
    }
    return x;
}

void save_generator(const std::filesystem::path &path, const GeneratorParams &g) {
    nn::save_checkpoint(path, g.params, {{"role", "generator"}, {"stage", to_string(g.stage)}, {"arch", g.arch.to_json()}});
}

void save_discriminator(const std::filesystem::path &path, const DiscriminatorParams &d) {
    nn::save_checkpoint(path, d.params,
                        {{"role", "discriminator"}, {"stage", to_string(d.stage)}, {"arch", d.arch.to_json()}});
}

GeneratorParams load_generator(const std::filesystem::path &path) {
    auto ck = nn::load_checkpoint(path);
    if (ck.meta.value("role", "") != "generator") {
        throw DataError(path.string() + " is not a generator checkpoint");
    }
    GeneratorParams g;
    g.stage = stage_from_string(ck.meta.value("stage", "global"));
    g.arch = GeneratorArch::from_json(ck.meta.value("arch", json::object()));
    check_layout(ck.params, init_generator(g.stage, 0, g.arch).params, "generator");
    g.params = std::move(ck.params);
    return g;
}

DiscriminatorParams load_discriminator(const std::filesystem::path &path) {
    auto ck = nn::load_checkpoint(path);
    if (ck.meta.value("role", "") != "discriminator") {
        throw DataError(path.string() + " is not a discriminator checkpoint");
    }
    DiscriminatorParams d;
    d.stage = stage_from_string(ck.meta.value("stage", "global"));
    d.arch = DiscriminatorArch::from_json(ck.meta.value("arch", json::object()));
    check_layout(ck.params, init_discriminator(d.stage, 0, d.arch).params, "discriminator");
    d.params = std::move(ck.params);
    return d;
}

} // namespace dirforge
