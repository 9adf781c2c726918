#pragma once

#include <stdexcept>
#include <string>

namespace kvlab {

// Error taxonomy used across the library. The CLI maps each class to a
// distinct exit code.

// Invalid model or experiment configuration (bad dimensions, bad spec).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A call violated an operation's preconditions (bad span, shape mismatch).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Cache stitching produced or detected a position inconsistency.
struct AssemblyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A judge-prompt region map is malformed (overlap, gap, bad permutation).
struct LayoutError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Two artifacts that must be compared were produced under incompatible
// protocols (e.g. decision logs with differing permutations).
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace kvlab
