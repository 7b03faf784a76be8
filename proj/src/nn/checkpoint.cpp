#include "dirforge/nn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "dirforge/container.hpp"
#include "dirforge/errors.hpp"

namespace dirforge::nn {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor &ParamSet::add(const std::string &name, Shape shape, std::vector<float> values) {
    if (contains(name)) {
        throw std::invalid_argument("duplicate parameter name: " + name);
    }
    entries_.push_back(NamedTensor{name, Tensor(shape, std::move(values), true)});
    return entries_.back().tensor;
}

bool ParamSet::contains(const std::string &name) const {
    for (const auto &e : entries_) {
        if (e.name == name) {
            return true;
        }
    }
    return false;
}

const Tensor &ParamSet::get(const std::string &name) const {
    for (const auto &e : entries_) {
        if (e.name == name) {
            return e.tensor;
        }
    }
    throw std::out_of_range("unknown parameter: " + name);
}

Tensor &ParamSet::get(const std::string &name) {
    return const_cast<Tensor &>(std::as_const(*this).get(name));
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto &e : entries_) {
        n += e.tensor.shape().numel();
    }
    return n;
}

void ParamSet::zero_grad() {
    for (auto &e : entries_) {
        e.tensor.zero_grad();
    }
}

bool operator==(const ParamSet &a, const ParamSet &b) {
    if (a.entries_.size() != b.entries_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
        const auto &x = a.entries_[i];
        const auto &y = b.entries_[i];
        if (x.name != y.name || !(x.tensor.shape() == y.tensor.shape())) {
            return false;
        }
        const auto xv = x.tensor.values();
        const auto yv = y.tensor.values();
        if (std::memcmp(xv.data(), yv.data(), xv.size_bytes()) != 0) {
            return false;
        }
    }
    return true;
}

void save_checkpoint(const fs::path &path, const ParamSet &params, const json &meta) {
    const fs::path base = container_base(path);
    json manifest;
    manifest["format"] = "dirforge-checkpoint";
    manifest["dtype"] = "f32";
    manifest["meta"] = meta;
    json tensors = json::array();
    std::vector<char> payload;
    for (const auto &e : params.entries()) {
        const Shape &s = e.tensor.shape();
        const auto v = e.tensor.values();
        tensors.push_back({{"name", e.name},
                           {"shape", {s.n, s.c, s.x, s.y, s.z}},
                           {"offset", payload.size()},
                           {"bytes", v.size_bytes()}});
        const auto *bytes = reinterpret_cast<const char *>(v.data());
        payload.insert(payload.end(), bytes, bytes + v.size_bytes());
    }
    manifest["tensors"] = std::move(tensors);
    manifest["payload_sha256"] = sha256_hex(payload);
    atomic_write_file(fs::path(base.string() + ".bin"), payload);
    atomic_write_text(fs::path(base.string() + ".json"), manifest.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const fs::path &path) {
    const fs::path base = container_base(path);
    std::ifstream hin(base.string() + ".json");
    if (!hin) {
        throw DataError("missing checkpoint: " + base.string() + ".json");
    }
    json manifest;
    try {
        manifest = json::parse(hin);
    } catch (const json::exception &e) {
        throw DataError("invalid checkpoint manifest: " + std::string(e.what()));
    }
    std::ifstream bin(base.string() + ".bin", std::ios::binary);
    if (!bin) {
        throw DataError("missing checkpoint payload: " + base.string() + ".bin");
    }
    const std::string payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    LoadedCheckpoint out;
    try {
        if (manifest.at("dtype").get<std::string>() != "f32") {
            throw DataError("unsupported checkpoint dtype");
        }
        if (manifest.contains("payload_sha256") &&
            manifest.at("payload_sha256").get<std::string>() != sha256_hex(std::span<const char>(payload))) {
            throw DataError("checkpoint payload checksum mismatch: " + base.string() + ".bin");
        }
        out.meta = manifest.value("meta", json::object());
        for (const auto &t : manifest.at("tensors")) {
            const auto dims = t.at("shape").get<std::vector<int>>();
            if (dims.size() != 5) {
                throw DataError("checkpoint tensor shape must have 5 entries");
            }
            const Shape s{dims[0], dims[1], dims[2], dims[3], dims[4]};
            const auto offset = t.at("offset").get<std::size_t>();
            const auto bytes = t.at("bytes").get<std::size_t>();
            if (bytes != s.numel() * sizeof(float) || offset + bytes > payload.size()) {
                throw DataError("checkpoint payload size mismatch for " + t.at("name").get<std::string>());
            }
            std::vector<float> values(s.numel());
            std::memcpy(values.data(), payload.data() + offset, bytes);
            out.params.add(t.at("name").get<std::string>(), s, std::move(values));
        }
    } catch (const json::exception &e) {
        throw DataError("invalid checkpoint manifest: " + std::string(e.what()));
    } catch (const std::invalid_argument &e) {
        throw DataError(e.what());
    }
    return out;
}

} // namespace dirforge::nn
