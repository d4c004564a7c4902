#pragma once

#include <stdexcept>
#include <string>

namespace sfdd {

enum class ErrorKind {
  InvalidShape,
  InvalidInput,
  InvalidSpec,
  InvalidLabel,
  InvalidParameter,
  Contract,
  Format,
  Consistency,
  Io,
  EmptyClass,
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidShape: return "invalid-shape";
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::InvalidSpec: return "invalid-spec";
    case ErrorKind::InvalidLabel: return "invalid-label";
    case ErrorKind::InvalidParameter: return "invalid-parameter";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Format: return "format";
    case ErrorKind::Consistency: return "consistency";
    case ErrorKind::Io: return "io";
    case ErrorKind::EmptyClass: return "empty-class";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + msg), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace sfdd
