#pragma once

#include <stdexcept>
#include <string>

namespace p3d {

// Tensor or layer received a shape it cannot accept.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid layer / model / pipeline / run configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A required conditioning input (fps, embedding, ...) was not supplied.
struct MissingConditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values or other numerical breakdown (training divergence etc).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace p3d
