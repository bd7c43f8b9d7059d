#pragma once

#include <stdexcept>
#include <string>

namespace partsplat {

enum class ErrorKind {
  InvalidInput,
  Bounds,
  Shape,
  EmptyInput,
  BehindCamera,
  InternalConsistency,
  Format,
  Io,
  Config,
  Divergence,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Bounds: return "bounds";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::EmptyInput: return "empty-input";
    case ErrorKind::BehindCamera: return "behind-camera";
    case ErrorKind::InternalConsistency: return "internal-consistency";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
    case ErrorKind::Config: return "config";
    case ErrorKind::Divergence: return "divergence";
  }
  return "unknown";
}

// All library failures are reported through this type; `kind()` lets callers
// (and the CLI exit-code mapping) distinguish the category.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace partsplat
