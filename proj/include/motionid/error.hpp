#pragma once

#include <stdexcept>
#include <string>

namespace motionid {

// Error classes map to CLI exit codes: ConfigError -> 2, DataError -> 3,
// NumericError (and anything unexpected) -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension mismatches. Messages always name the offending shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace motionid
