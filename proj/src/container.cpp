#include "dirforge/container.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

#include "dirforge/errors.hpp"
#include "json.hpp"

namespace dirforge {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

fs::path container_base(const fs::path &path) {
    const auto ext = path.extension().string();
    if (ext == ".json" || ext == ".bin") {
        fs::path base = path;
        base.replace_extension();
        return base;
    }
    return path;
}

static fs::path with_suffix(const fs::path &base, const char *suffix) {
    return fs::path(base.string() + suffix);
}

void atomic_write_file(const fs::path &path, std::span<const char> bytes) {
    const fs::path tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot open " + tmp.string() + " for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw DataError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw DataError("cannot rename into " + path.string());
    }
}

void atomic_write_text(const fs::path &path, const std::string &text) {
    atomic_write_file(path, std::span<const char>(text.data(), text.size()));
}

static std::string read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("missing file: " + path.string());
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_container(const fs::path &path, const RawContainer &c) {
    if (!c.dims.valid()) {
        throw DataError("container dims must be >= 1");
    }
    validate_spacing(c.spacing);
    if (c.channels < 1 || c.data.size() != c.dims.count() * static_cast<std::size_t>(c.channels)) {
        throw DataError("container payload does not match dims x channels");
    }
    const fs::path base = container_base(path);
    json header = {
        {"dims", {c.dims.nx, c.dims.ny, c.dims.nz}},
        {"spacing_mm", {c.spacing[0], c.spacing[1], c.spacing[2]}},
        {"dtype", "f32"},
        {"channels", c.channels},
    };
    const auto *raw = reinterpret_cast<const char *>(c.data.data());
    atomic_write_file(with_suffix(base, ".bin"), std::span<const char>(raw, c.data.size() * sizeof(float)));
    atomic_write_text(with_suffix(base, ".json"), header.dump(2) + "\n");
}

RawContainer read_container(const fs::path &path) {
    const fs::path base = container_base(path);
    const std::string header_text = read_file(with_suffix(base, ".json"));
    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception &e) {
        throw DataError("malformed header " + with_suffix(base, ".json").string() + ": " + e.what());
    }

    RawContainer c;
    try {
        if (header.at("dtype").get<std::string>() != "f32") {
            throw DataError("unsupported dtype '" + header.at("dtype").get<std::string>() + "'");
        }
        const auto dims = header.at("dims").get<std::vector<int>>();
        const auto spacing = header.at("spacing_mm").get<std::vector<double>>();
        if (dims.size() != 3 || spacing.size() != 3) {
            throw DataError("dims and spacing_mm must have 3 entries");
        }
        c.dims = Dims{dims[0], dims[1], dims[2]};
        c.spacing = Vec3{spacing[0], spacing[1], spacing[2]};
        c.channels = header.value("channels", 1);
    } catch (const json::exception &e) {
        throw DataError("invalid header " + with_suffix(base, ".json").string() + ": " + e.what());
    }
    if (!c.dims.valid() || c.channels < 1) {
        throw DataError("invalid dims or channel count in header");
    }
    validate_spacing(c.spacing);

    const std::string payload = read_file(with_suffix(base, ".bin"));
    const std::size_t expected = c.dims.count() * static_cast<std::size_t>(c.channels) * sizeof(float);
    if (payload.size() != expected) {
        throw DataError("payload size mismatch: expected " + std::to_string(expected) + " bytes, found " +
                        std::to_string(payload.size()));
    }
    c.data.resize(c.dims.count() * static_cast<std::size_t>(c.channels));
    std::memcpy(c.data.data(), payload.data(), expected);
    for (float v : c.data) {
        if (!std::isfinite(v)) {
            throw DataError("payload contains non-finite values");
        }
    }
    return c;
}

void save_volume(const fs::path &path, const Volume &vol) {
    const auto v = vol.voxels();
    write_container(path, RawContainer{vol.dims(), vol.spacing(), 1, std::vector<float>(v.begin(), v.end())});
}

Volume load_volume(const fs::path &path) {
    RawContainer c = read_container(path);
    if (c.channels != 1) {
        throw DataError("expected a single-channel volume, found " + std::to_string(c.channels) + " channels");
    }
    return Volume(c.dims, c.spacing, std::move(c.data));
}

void save_mask(const fs::path &path, const Mask &mask, const Vec3 &spacing) {
    std::vector<float> data(mask.dims().count());
    for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = mask.test(i) ? 1.0f : 0.0f;
    }
    write_container(path, RawContainer{mask.dims(), spacing, 1, std::move(data)});
}

Mask load_mask(const fs::path &path) {
    const RawContainer c = read_container(path);
    if (c.channels != 1) {
        throw DataError("expected a single-channel mask");
    }
    std::vector<std::uint8_t> bits(c.data.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (c.data[i] != 0.0f && c.data[i] != 1.0f) {
            throw DataError("mask payload must contain only 0.0 and 1.0");
        }
        bits[i] = c.data[i] == 1.0f ? 1 : 0;
    }
    return Mask(c.dims, std::move(bits));
}

void save_dvf(const fs::path &path, const DVF &dvf, const Vec3 &spacing) {
    validate_spacing(spacing);
    std::vector<float> data(dvf.data().begin(), dvf.data().end());
    const std::size_t n = dvf.dims().count();
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            float &v = data[static_cast<std::size_t>(c) * n + i];
            v = static_cast<float>(static_cast<double>(v) * spacing[static_cast<std::size_t>(c)]);
        }
    }
    write_container(path, RawContainer{dvf.dims(), spacing, 3, std::move(data)});
}

// Inverse of the save-side conversion; prefers a neighbour of the plain
// quotient when that neighbour reproduces the stored mm value exactly.
static float mm_to_voxel(float mm, double s) {
    const float q = static_cast<float>(static_cast<double>(mm) / s);
    const auto back = [s](float c) { return static_cast<float>(static_cast<double>(c) * s); };
    if (back(q) == mm) {
        return q;
    }
    for (float c : {std::nextafter(q, -INFINITY), std::nextafter(q, INFINITY)}) {
        if (back(c) == mm) {
            return c;
        }
    }
    return q;
}

LoadedDvf load_dvf(const fs::path &path) {
    RawContainer c = read_container(path);
    if (c.channels != 3) {
        throw DataError("expected a 3-channel displacement field, found " + std::to_string(c.channels) + " channels");
    }
    const std::size_t n = c.dims.count();
    for (int ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < n; ++i) {
            float &v = c.data[static_cast<std::size_t>(ch) * n + i];
            v = mm_to_voxel(v, c.spacing[static_cast<std::size_t>(ch)]);
        }
    }
    return LoadedDvf{DVF(c.dims, std::move(c.data)), c.spacing};
}

std::string sha256_hex(std::span<const char> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw InvariantError("sha256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

std::string file_sha256(const fs::path &file) {
    const std::string content = read_file(file);
    return sha256_hex(std::span<const char>(content.data(), content.size()));
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace dirforge
