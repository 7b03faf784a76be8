#pragma once

#include <filesystem>
#include <vector>

#include "dirforge/volume.hpp"

namespace dirforge {

// Physical position in mm relative to the centre of voxel (0,0,0).
struct Landmark {
    int id = 0;
    Vec3 mm{};
};

struct LandmarkSet {
    std::vector<Landmark> entries;

    [[nodiscard]] std::size_t size() const { return entries.size(); }
    // Throws DataError on duplicate ids.
    void validate() const;
    // Throws DataError when a position lies outside [0, (n-1)*spacing].
    void validate_extent(const Dims &dims, const Vec3 &spacing) const;
};

// CSV with header "id,x_mm,y_mm,z_mm".
void write_landmarks_csv(const std::filesystem::path &path, const LandmarkSet &set);
LandmarkSet read_landmarks_csv(const std::filesystem::path &path);

} // namespace dirforge
