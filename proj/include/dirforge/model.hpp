#pragma once

// Generator (11-conv encoder, two attention gates, coarse DVF head with
// trilinear upsampling) and fully convolutional discriminator. Both stages
// use the same code; only the parameters and input sizes differ.

#include <array>
#include <cstdint>
#include <string>

#include "dirforge/nn/checkpoint.hpp"
#include "dirforge/nn/ops.hpp"
#include "json.hpp"

namespace dirforge {

enum class Stage { global, local };

std::string to_string(Stage s);
Stage stage_from_string(const std::string &s);

struct GeneratorArch {
    // Channel widths of the four encoder blocks.
    std::array<int, 4> widths{16, 32, 64, 64};
    // Bound on each predicted displacement component, full-resolution voxels.
    double max_disp = 10.0;
    float leaky_slope = 0.2f;
    // HU are multiplied by this before entering the network.
    float input_scale = 1e-3f;

    // Layer table (name, in, out, kernel, stride) plus the scalars above.
    [[nodiscard]] nlohmann::json to_json() const;
    static GeneratorArch from_json(const nlohmann::json &j);
    friend bool operator==(const GeneratorArch &, const GeneratorArch &) = default;
};

struct DiscriminatorArch {
    std::array<int, 3> widths{16, 32, 64};
    float leaky_slope = 0.2f;
    float input_scale = 1e-3f;

    [[nodiscard]] nlohmann::json to_json() const;
    static DiscriminatorArch from_json(const nlohmann::json &j);
    friend bool operator==(const DiscriminatorArch &, const DiscriminatorArch &) = default;
};

struct GeneratorParams {
    Stage stage = Stage::global;
    GeneratorArch arch;
    nn::ParamSet params;
};

struct DiscriminatorParams {
    Stage stage = Stage::global;
    DiscriminatorArch arch;
    nn::ParamSet params;
};

// He-uniform (fan-in) weights, zero biases, zero DVF head.
GeneratorParams init_generator(Stage stage, std::uint64_t seed, const GeneratorArch &arch = {});
DiscriminatorParams init_discriminator(Stage stage, std::uint64_t seed, const DiscriminatorArch &arch = {});

// moving, target: (1,1,X,Y,Z) in HU with X, Y, Z divisible by 8.
// Returns a (1,3,X,Y,Z) displacement field in voxels.
nn::Tensor generator_forward(const nn::Tensor &moving, const nn::Tensor &target, const GeneratorParams &g);

// image: (1,1,X,Y,Z) in HU, every dim >= 16. Returns per-region realism
// probabilities at 1/16 resolution.
nn::Tensor discriminator_forward(const nn::Tensor &image, const DiscriminatorParams &d);

// Checkpoint I/O; the manifest metadata records role, stage and architecture.
void save_generator(const std::filesystem::path &path, const GeneratorParams &g);
void save_discriminator(const std::filesystem::path &path, const DiscriminatorParams &d);
GeneratorParams load_generator(const std::filesystem::path &path);
DiscriminatorParams load_discriminator(const std::filesystem::path &path);

} // namespace dirforge
