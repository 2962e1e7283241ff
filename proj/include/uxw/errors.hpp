#pragma once

#include <stdexcept>
#include <string>

namespace uxw {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Loss over an empty set of positions (every position masked).
struct EmptyLossError : std::domain_error {
  using std::domain_error::domain_error;
};

// A weight selector that names no matrix of the given model.
struct SelectorError : ConfigError {
  using ConfigError::ConfigError;
};

// Cosine with a zero-norm operand.
struct UndefinedCosineError : std::domain_error {
  using std::domain_error::domain_error;
};

// Raised when a contract on call order or graph state is broken (e.g. a
// second backward() on the same tape).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace uxw
