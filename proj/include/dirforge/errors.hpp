#pragma once

#include <stdexcept>
#include <string>

namespace dirforge {

// Bad or inconsistent input data: malformed files, mismatched dimensions,
// non-finite payloads. The CLI maps these to exit code 2.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string &what) : std::runtime_error(what) {}
};

// A broken internal contract. The CLI maps these to exit code 3.
class InvariantError : public std::logic_error {
public:
    explicit InvariantError(const std::string &what) : std::logic_error(what) {}
};

} // namespace dirforge
