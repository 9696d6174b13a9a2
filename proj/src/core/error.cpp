#include "pecad/core/error.hpp"

namespace pecad {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kIngest: return "ingest error";
    case ErrorKind::kCorruptVolume: return "corrupt volume";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kInvalidSplit: return "invalid split";
    case ErrorKind::kDegenerateConfig: return "degenerate config";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kNoLungFound: return "no lung found";
    case ErrorKind::kInvalidBox: return "invalid box";
    case ErrorKind::kPatch: return "patch error";
    case ErrorKind::kIncompatibleCheckpoint: return "incompatible checkpoint";
    case ErrorKind::kUnsupportedArchitecture: return "unsupported architecture";
    case ErrorKind::kUndefinedAuc: return "undefined AUC";
    case ErrorKind::kUndefinedCorrelation: return "undefined correlation";
    case ErrorKind::kDegenerateTest: return "degenerate test";
  }
  return "error";
}

bool is_config_error(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kDegenerateConfig:
    case ErrorKind::kPatch:
    case ErrorKind::kIncompatibleCheckpoint:
    case ErrorKind::kUnsupportedArchitecture:
      return true;
    default:
      return false;
  }
}

}  // namespace pecad
