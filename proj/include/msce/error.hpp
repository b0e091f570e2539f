#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace msce {

// Exit-status categories shared by the library and the command-line tool.
enum class ErrorKind : int {
  computation = 1,
  input = 2,
  config = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& code() const noexcept { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& message, std::size_t row = 0)
      : Error(ErrorKind::input, "INPUT", message), row_(row) {}
  // 1-based data row, 0 when not tied to a row.
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message)
      : Error(ErrorKind::config, "CONFIG", message) {}
};

// Cholesky factorization failed; leading_minor is 1-based.
class FactorizationError : public Error {
 public:
  explicit FactorizationError(std::size_t leading_minor)
      : Error(ErrorKind::computation, "NOT_POSITIVE_DEFINITE",
              "matrix is not positive definite: leading minor " +
                  std::to_string(leading_minor) + " is not positive"),
        leading_minor_(leading_minor) {}
  std::size_t leading_minor() const noexcept { return leading_minor_; }

 private:
  std::size_t leading_minor_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double last_objective)
      : Error(ErrorKind::computation, "NO_CONVERGENCE",
              what + " (last objective " + std::to_string(last_objective) + ")"),
        last_objective_(last_objective) {}
  double last_objective() const noexcept { return last_objective_; }

 private:
  double last_objective_;
};

class ComputationError : public Error {
 public:
  ComputationError(std::string code, const std::string& message)
      : Error(ErrorKind::computation, std::move(code), message) {}
};

}  // namespace msce
