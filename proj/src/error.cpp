#include "forge/error.hpp"

namespace forge {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ZeroNorm: return "ZeroNorm";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::Io: return "Io";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::TruncatedData: return "TruncatedData";
    case ErrorKind::BadPairing: return "BadPairing";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::NotADistribution: return "NotADistribution";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::BadTarget: return "BadTarget";
    case ErrorKind::DegenerateData: return "DegenerateData";
    case ErrorKind::DegenerateComponents: return "DegenerateComponents";
    case ErrorKind::Misaligned: return "Misaligned";
    case ErrorKind::StaleCache: return "StaleCache";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyUtterance: return "EmptyUtterance";
    case ErrorKind::MissingUtterance: return "MissingUtterance";
    case ErrorKind::OneClassOnly: return "OneClassOnly";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::TooShort: return "TooShort";
    case ErrorKind::BadFraction: return "BadFraction";
    case ErrorKind::BadId: return "BadId";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::TruthAccessDenied: return "TruthAccessDenied";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace forge
