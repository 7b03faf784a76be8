#pragma once

// Named parameter sets and their on-disk form: <base>.json manifest (names,
// shapes, byte offsets, free-form metadata) plus <base>.bin f32 payload.

#include <filesystem>
#include <string>
#include <vector>

#include "dirforge/nn/tensor.hpp"
#include "json.hpp"

namespace dirforge::nn {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class ParamSet {
public:
    // Registers a leaf tensor that requires grad. Names must be unique.
    Tensor &add(const std::string &name, Shape shape, std::vector<float> values);
    [[nodiscard]] const Tensor &get(const std::string &name) const;
    [[nodiscard]] Tensor &get(const std::string &name);
    [[nodiscard]] bool contains(const std::string &name) const;
    [[nodiscard]] const std::vector<NamedTensor> &entries() const { return entries_; }
    [[nodiscard]] std::vector<NamedTensor> &entries() { return entries_; }
    [[nodiscard]] std::size_t parameter_count() const;
    void zero_grad();

    friend bool operator==(const ParamSet &a, const ParamSet &b);

private:
    std::vector<NamedTensor> entries_;
};

void save_checkpoint(const std::filesystem::path &path, const ParamSet &params, const nlohmann::json &meta);

struct LoadedCheckpoint {
    ParamSet params;
    nlohmann::json meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path &path);

} // namespace dirforge::nn
