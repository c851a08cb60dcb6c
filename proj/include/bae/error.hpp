#pragma once

#include <stdexcept>
#include <string>

namespace bae {

enum class ErrorCode {
  NonSymmetric,
  NoConvergence,
  ZeroMatrix,
  DomainError,
  DimensionMismatch,
  IndexOutOfRange,
  PriorMismatch,
  NonFinite,
  NotUnitNorm,
  InvalidSpec,
  BadMagic,
  DimMismatch,
  TruncatedFile,
  ChecksumFail,
  ZeroForm,
  MissingEigenvectors,
  IoError,
  ConfigError,
};

const char* to_string(ErrorCode code);

// Every failure surfaced by the library carries one of the codes above so
// callers (and the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace bae
