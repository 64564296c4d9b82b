#pragma once

#include <stdexcept>
#include <string>

namespace edlm {

// Contract violations carry their own types so callers can tell a bad
// request apart from a broken invariant.

struct NonDivisibleError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DimensionMismatchError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct EmptyVisibilityError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IndexOutOfRangeError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct VocabOverflowError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct BadConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct BadWeightsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Recorded trace disagrees with a from-scratch recomputation. This signals
// an internal inconsistency, not a user error.
struct TraceMismatchError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace edlm
