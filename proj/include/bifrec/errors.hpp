#pragma once

#include <stdexcept>
#include <string>

namespace bifrec {

// Thrown for malformed inputs: bad shapes, unknown ops, vocabulary violations.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input at the command level (flags, impossible configurations).
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files, schema violations, incompatible checkpoints.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failure: NaN loss, consumed tape, non-scalar backward.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bifrec
