#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bm {

/// Error vocabulary shared by the session state machine and the wire protocol.
enum class ErrorCode {
  Malformed,
  Schema,
  UnknownType,
  Oversize,
  Version,
  Sequence,
  Auth,
  UnknownSession,
  UnknownToken,
  UnknownPlayer,
  Capacity,
  RegistryFull,
  InvalidName,
  InvalidLabel,
  Paused,
  UndecodableFrame,
  RateLimited,
  DatasetLocked,
  NotFound,
  Internal,
};

/// Wire spelling, e.g. "E_UNKNOWN_TYPE".
std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace bm
