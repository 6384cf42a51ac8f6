// Error taxonomy shared by all qkcv components.
#pragma once

#include <stdexcept>
#include <string>

namespace qkcv {

// Shape or dimension disagreement between operands.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A caller violated an operation's contract (bad argument, wrong mode, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Problem in user-supplied data (CSV rows, category codes out of range, ...).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration values.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A numeric kernel produced NaN/Inf. Message names the offending op.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Broken invariant inside the library itself (tape leak, registry drift).
// Never the caller's fault.
struct InternalError : std::logic_error {
    explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace qkcv
