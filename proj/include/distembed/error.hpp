#pragma once

#include <stdexcept>
#include <string>

namespace distembed {

enum class ErrorKind {
  IncompatibleShape,
  Domain,
  InvalidConfig,
  InvalidGeometry,
  ContractViolation,
  Checksum,
  Version,
  Io,
  Decode,
  InvalidDataset,
  InvalidInput,
  Capability,
  NumericFailure,
};

const char* to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it onto a stable exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::IncompatibleShape: return "incompatible-shape";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::InvalidConfig: return "invalid-config";
    case ErrorKind::InvalidGeometry: return "invalid-geometry";
    case ErrorKind::ContractViolation: return "contract-violation";
    case ErrorKind::Checksum: return "checksum";
    case ErrorKind::Version: return "version";
    case ErrorKind::Io: return "io";
    case ErrorKind::Decode: return "decode";
    case ErrorKind::InvalidDataset: return "invalid-dataset";
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Capability: return "capability";
    case ErrorKind::NumericFailure: return "numeric-failure";
  }
  return "unknown";
}

}  // namespace distembed
