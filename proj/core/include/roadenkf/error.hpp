#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace roadenkf {

// Base class for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// log/exp (and similar) evaluated outside their domain.
class DomainError : public Error {
 public:
  DomainError(const std::string& what, std::size_t index)
      : Error(what + " (at flat index " + std::to_string(index) + ")"), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

// Cholesky hit a non-positive pivot.
class NotSpdError : public Error {
 public:
  explicit NotSpdError(std::size_t pivot)
      : Error("matrix is not symmetric positive definite (pivot " + std::to_string(pivot) + ")"),
        pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

// Misuse of an API contract (e.g. backward from a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid distribution parameters (e.g. negative scale).
class ParameterizationError : public Error {
 public:
  using Error::Error;
};

// Ensemble too small to form empirical moments.
class DegenerateEnsembleError : public Error {
 public:
  using Error::Error;
};

// Non-finite state during integration or filtering. `step` is the substep
// index for integrators and the time index for filters.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Corrupt or truncated TNS1 container.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Invalid user configuration (bad JSON field, inconsistent sizes).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Index outside a valid range (e.g. forecast lead beyond T_f).
class RangeError : public Error {
 public:
  using Error::Error;
};

}  // namespace roadenkf
