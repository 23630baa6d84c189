#pragma once

#include <stdexcept>
#include <string>

namespace mona {

// Shape/dimension disagreement between operands. Messages name both shapes.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Token count does not match the requested spatial grid.
class GeometryError : public std::runtime_error {
 public:
  explicit GeometryError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid build-time configuration (divisibility, unknown names, bad values).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: calling an operation in a state that forbids it.
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call contract (e.g. backward on a non-scalar).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// File parse/serialization failure. Carries a byte offset when known.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted (non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mona
