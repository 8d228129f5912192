#pragma once

#include <stdexcept>
#include <string>

namespace cctlab {

/// Invalid configuration (architecture fields, optimizer settings, masks).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed runtime input (shape mismatch, out-of-range argument).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dataset file problems (missing, truncated, wrong layout).
struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite values or degenerate numeric state.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Serialization problems (checkpoints, dumps, reports).
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace cctlab
