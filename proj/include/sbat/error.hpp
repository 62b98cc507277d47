#pragma once

#include <stdexcept>
#include <string>

namespace sbat {

/// Bad user input: malformed files, impossible sizes, invalid arguments.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Configuration documents that violate the schema or are inconsistent.
class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

/// File ingestion failures (header/payload disagreement, NaN payloads, ...).
class LoadError : public InputError {
 public:
  using InputError::InputError;
};

/// Header and payload disagree on the tensor shape.
class ShapeMismatchError : public LoadError {
 public:
  using LoadError::LoadError;
};

/// NaN or infinite values in a payload.
class NonFiniteError : public LoadError {
 public:
  using LoadError::LoadError;
};

/// Series and graph describe different node counts.
class NodeMismatchError : public LoadError {
 public:
  using LoadError::LoadError;
};

/// Violated preconditions between internal components.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Shape disagreement between operands.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Non-finite values, non-convergence and similar numerical failures.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Softmax row or pooling group with no valid entry.
class DegenerateError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace sbat
