#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace biloop {

/// Machine-readable error categories. The CLI maps these to exit codes.
enum class ErrorCategory {
  InvalidInput = 2,
  EmptyInput = 3,
  Io = 4,
  Format = 5,
  MissingDependency = 6,
  Divergence = 7,
  Degenerate = 8,
};

inline std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::InvalidInput: return "invalid-input";
    case ErrorCategory::EmptyInput: return "empty-input";
    case ErrorCategory::Io: return "io";
    case ErrorCategory::Format: return "format";
    case ErrorCategory::MissingDependency: return "missing-dependency";
    case ErrorCategory::Divergence: return "divergence";
    case ErrorCategory::Degenerate: return "degenerate";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& msg) {
  throw Error(c, msg);
}

inline void require(bool cond, const std::string& msg,
                    ErrorCategory c = ErrorCategory::InvalidInput) {
  if (!cond) throw Error(c, msg);
}

}  // namespace biloop
