#pragma once

// On-disk container: <base>.json header + <base>.bin little-endian f32
// payload, channel-major then x-fastest.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dirforge/dvf.hpp"
#include "dirforge/landmarks.hpp"
#include "dirforge/volume.hpp"

namespace dirforge {

struct RawContainer {
    Dims dims{};
    Vec3 spacing{1.0, 1.0, 1.0};
    int channels = 1;
    std::vector<float> data;
};

// Accepts "name", "name.json" or "name.bin" and returns "name".
std::filesystem::path container_base(const std::filesystem::path &path);

void write_container(const std::filesystem::path &path, const RawContainer &c);
RawContainer read_container(const std::filesystem::path &path);

void save_volume(const std::filesystem::path &path, const Volume &vol);
Volume load_volume(const std::filesystem::path &path);

// Mask payload is f32 0.0 / 1.0.
void save_mask(const std::filesystem::path &path, const Mask &mask, const Vec3 &spacing);
Mask load_mask(const std::filesystem::path &path);

// Displacements are converted voxel -> mm on save and mm -> voxel on load.
void save_dvf(const std::filesystem::path &path, const DVF &dvf, const Vec3 &spacing);
struct LoadedDvf {
    DVF dvf;
    Vec3 spacing{};
};
LoadedDvf load_dvf(const std::filesystem::path &path);

// Writes to a sibling temporary and renames into place.
void atomic_write_file(const std::filesystem::path &path, std::span<const char> bytes);
void atomic_write_text(const std::filesystem::path &path, const std::string &text);

std::string sha256_hex(std::span<const char> bytes);
std::string file_sha256(const std::filesystem::path &file);

// Shortest round-trip decimal form.
std::string format_double(double v);

} // namespace dirforge
