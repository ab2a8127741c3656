#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace factlab {

// Row-major dense matrix; every tensor in the lab is one of these two.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using TokenId = int;

enum class ErrorCategory {
  invalid_argument,  // caller violated a precondition
  numeric,           // non-finite values, singular systems, divergence
  io,                // filesystem problems
  format,            // malformed files (datasets, checkpoints, configs)
  state,             // operation not valid in the current state
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::invalid_argument: return "invalid_argument";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::io: return "io";
    case ErrorCategory::format: return "format";
    case ErrorCategory::state: return "state";
  }
  return "unknown";
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace factlab
