#include "bae/error.hpp"

namespace bae {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonSymmetric: return "NonSymmetric";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::ZeroMatrix: return "ZeroMatrix";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::PriorMismatch: return "PriorMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NotUnitNorm: return "NotUnitNorm";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::ChecksumFail: return "ChecksumFail";
    case ErrorCode::ZeroForm: return "ZeroForm";
    case ErrorCode::MissingEigenvectors: return "MissingEigenvectors";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace bae
