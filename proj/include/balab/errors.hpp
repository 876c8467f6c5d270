#pragma once

#include <stdexcept>
#include <string>

namespace balab {

// One exception type per failure class; the CLI maps these onto exit codes.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FingerprintError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace balab
