#include "quantlens/error.hpp"

namespace qlens {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::DegenerateSample: return "DegenerateSample";
    case ErrorKind::CapacityExceeded: return "CapacityExceeded";
    case ErrorKind::TokenizationError: return "TokenizationError";
    case ErrorKind::InvalidPatch: return "InvalidPatch";
    case ErrorKind::TrainingFailure: return "TrainingFailure";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::CorruptArchive: return "CorruptArchive";
    case ErrorKind::TraceIncomplete: return "TraceIncomplete";
    case ErrorKind::NotFound: return "NotFound";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::AlignmentError: return "AlignmentError";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace qlens
