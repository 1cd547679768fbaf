#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fakescope {

enum class ErrorKind {
  Load,
  Validation,
  Argument,
  Decode,
  Numeric,
  TrainingData,
  DegenerateSplit,
  Adapter,
  Capability,
  DegenerateModel,
  NotFound,
  Startup,
  Internal,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Load: return "load";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Argument: return "argument";
    case ErrorKind::Decode: return "decode";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::TrainingData: return "training-data";
    case ErrorKind::DegenerateSplit: return "degenerate-split";
    case ErrorKind::Adapter: return "adapter";
    case ErrorKind::Capability: return "capability";
    case ErrorKind::DegenerateModel: return "degenerate-model";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::Startup: return "startup";
    case ErrorKind::Internal: return "internal";
  }
  return "unknown";
}

}  // namespace fakescope
