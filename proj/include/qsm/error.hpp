#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qsm {

/// Error categories. Each one maps to a distinct CLI exit code.
enum class ErrorCode {
  invalid_argument = 10,
  dim_mismatch = 11,
  unit_mismatch = 12,
  non_finite = 13,
  empty_mask = 14,
  bad_magic = 20,
  bad_header = 21,
  invalid_dims = 22,
  unknown_unit = 23,
  truncated_payload = 24,
  payload_mismatch = 25,
  io_failure = 26,
  not_converged = 30,
  diverged = 31,
  ill_conditioned = 32,
  shape_rejected = 33,
  memory_cap = 40,
  checkpoint_mismatch = 41,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised by iterative solvers; carries the residual reached.
class ConvergenceError : public Error {
 public:
  ConvergenceError(ErrorCode code, const std::string& what, double residual)
      : Error(code, what), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace qsm
