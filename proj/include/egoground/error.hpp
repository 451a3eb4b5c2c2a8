#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace egoground {

enum class ErrorCode {
  kInvalidInput,
  kDegenerateAfterClamp,
  kEmptyCategory,
  kTemplate,
  kTransport,
  kFormat,
  kCheckerFormat,
  kLoad,
  kValidation,
  kLeaseExpired,
  kForbidden,
  kNotFound,
  kIllegalTransition,
  kBatchAborted,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidInput: return "invalid_input";
    case ErrorCode::kDegenerateAfterClamp: return "degenerate_after_clamp";
    case ErrorCode::kEmptyCategory: return "empty_category";
    case ErrorCode::kTemplate: return "template";
    case ErrorCode::kTransport: return "transport";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kCheckerFormat: return "checker_format";
    case ErrorCode::kLoad: return "load";
    case ErrorCode::kValidation: return "validation";
    case ErrorCode::kLeaseExpired: return "lease_expired";
    case ErrorCode::kForbidden: return "forbidden";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kIllegalTransition: return "illegal_transition";
    case ErrorCode::kBatchAborted: return "batch_aborted";
  }
  return "unknown";
}

// Every failure the library raises carries one of the codes above so callers
// (and the CLI exit-code mapping) can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace egoground
