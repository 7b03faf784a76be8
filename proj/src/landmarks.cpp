#include "dirforge/landmarks.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "dirforge/container.hpp"
#include "dirforge/errors.hpp"

namespace dirforge {

void LandmarkSet::validate() const {
    std::set<int> seen;
    for (const auto &lm : entries) {
        if (!seen.insert(lm.id).second) {
            throw DataError("duplicate landmark id " + std::to_string(lm.id));
        }
    }
}

void LandmarkSet::validate_extent(const Dims &dims, const Vec3 &spacing) const {
    for (const auto &lm : entries) {
        for (int a = 0; a < 3; ++a) {
            const double extent = (dims[a] - 1) * spacing[static_cast<std::size_t>(a)];
            const double v = lm.mm[static_cast<std::size_t>(a)];
            if (v < 0.0 || v > extent) {
                throw DataError("landmark " + std::to_string(lm.id) + " lies outside the volume extent");
            }
        }
    }
}

void write_landmarks_csv(const std::filesystem::path &path, const LandmarkSet &set) {
    set.validate();
    std::string text = "id,x_mm,y_mm,z_mm\n";
    for (const auto &lm : set.entries) {
        text += std::to_string(lm.id) + "," + format_double(lm.mm[0]) + "," + format_double(lm.mm[1]) + "," +
                format_double(lm.mm[2]) + "\n";
    }
    atomic_write_text(path, text);
}

LandmarkSet read_landmarks_csv(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("missing landmark file: " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError("empty landmark file: " + path.string());
    }
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    if (line != "id,x_mm,y_mm,z_mm") {
        throw DataError("unexpected landmark header '" + line + "'");
    }
    LandmarkSet set;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        if (fields.size() != 4) {
            throw DataError("landmark row " + std::to_string(row) + " must have 4 fields");
        }
        try {
            Landmark lm;
            lm.id = std::stoi(fields[0]);
            for (std::size_t a = 0; a < 3; ++a) {
                lm.mm[a] = std::stod(fields[a + 1]);
            }
            set.entries.push_back(lm);
        } catch (const std::exception &) {
            throw DataError("unparseable landmark row " + std::to_string(row));
        }
    }
    set.validate();
    return set;
}

} // namespace dirforge
