#pragma once

#include <stdexcept>
#include <string>

namespace caf {

// Shape or length disagreement between values.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (dims, kernel widths, flags).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A call precondition was violated (non-scalar loss, non-positive step, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File, manifest or serialization failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf encountered where finite values are required (divergence, bad grads).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace caf
