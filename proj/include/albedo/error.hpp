#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace albedo {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  precondition,
  io,
  invariant_violation,
  not_found,
  non_finite,
  config,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::precondition: return "precondition";
    case ErrorCode::io: return "io";
    case ErrorCode::invariant_violation: return "invariant_violation";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::config: return "config";
  }
  return "unknown";
}

// Every failure in the library surfaces as this exception; the code is what
// the CLI serializes into its machine-readable error payload.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace albedo
