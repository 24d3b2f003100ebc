#pragma once

#include <stdexcept>
#include <string>

namespace flame {

// Violated operation precondition (caller bug).
struct precondition_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite or otherwise unusable numeric input.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Broken internal contract (absent modality passed to encode, no live
// component at compression time, ...).
struct contract_error : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed on-disk input (IDX payload, checkpoint archive).
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad run configuration (missing key, constraint violation). Carries the
// offending key path when known.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Divergent or otherwise failed training run.
struct training_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace flame
