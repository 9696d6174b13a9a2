#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pecad {

enum class ErrorKind {
  kConfig,
  kData,
  kIo,
  kIngest,
  kCorruptVolume,
  kValidation,
  kInvalidSplit,
  kDegenerateConfig,
  kShape,
  kIndex,
  kNoLungFound,
  kInvalidBox,
  kPatch,
  kIncompatibleCheckpoint,
  kUnsupportedArchitecture,
  kUndefinedAuc,
  kUndefinedCorrelation,
  kDegenerateTest,
};

std::string_view to_string(ErrorKind kind);

// Every failure surfaced by the library carries a kind so callers (and the
// CLI exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// True for failures caused by a bad configuration rather than bad data.
bool is_config_error(ErrorKind kind);

}  // namespace pecad
