#pragma once

#include <stdexcept>
#include <string>

namespace ems {

// Exit-code aligned error classes shared by the library and the CLI.
enum class ErrorCode : int {
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

inline const char* error_tag(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
      return "E_CONFIG";
    case ErrorCode::kData:
      return "E_DATA";
    case ErrorCode::kNumeric:
      return "E_NUMERIC";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace ems
