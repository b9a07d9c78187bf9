#pragma once

#include <stdexcept>
#include <string>

namespace tdsm {

// Base class for all library errors so callers can catch one type.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or mutually inconsistent user-supplied configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Shape or argument mismatch between caller-supplied values.
class InconsistentInputError : public Error {
 public:
  explicit InconsistentInputError(const std::string& what) : Error(what) {}
};

// A matrix required to be invertible is singular or nearly so.
class SingularMatrixError : public Error {
 public:
  explicit SingularMatrixError(const std::string& what) : Error(what) {}
};

// All mixture components underflowed, or an analogous loss of mass.
class NumericUnderflowError : public Error {
 public:
  explicit NumericUnderflowError(const std::string& what) : Error(what) {}
};

// Classifier probability at the conditioning label fell below the floor.
class DegenerateClassifierError : public Error {
 public:
  explicit DegenerateClassifierError(const std::string& what) : Error(what) {}
};

// Estimated matrix collapsed (determinant driven to zero) during training.
class IllConditionedError : public Error {
 public:
  explicit IllConditionedError(const std::string& what) : Error(what) {}
};

// Sampler state became non-finite.
class DivergedError : public Error {
 public:
  explicit DivergedError(const std::string& what) : Error(what) {}
};

}  // namespace tdsm
