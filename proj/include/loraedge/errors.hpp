#pragma once

#include <stdexcept>
#include <string>

namespace loraedge {

// Shape or rank disagreement between operands.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values or invalid numeric arguments.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bundle or dataset serialization problems.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operation applied to a model in the wrong state (double merge, re-attach, stale cache).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

} // namespace loraedge
