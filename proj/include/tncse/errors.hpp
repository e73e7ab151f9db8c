#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tncse {

// Failure classes surfaced to the command line. The strings are stable and
// machine-parsable; tools print them verbatim.
enum class ErrorClass { success, config, data, checkpoint, numeric };

inline std::string_view error_class_name(ErrorClass c) {
  switch (c) {
    case ErrorClass::success: return "success";
    case ErrorClass::config: return "config-error";
    case ErrorClass::data: return "data-error";
    case ErrorClass::checkpoint: return "checkpoint-error";
    case ErrorClass::numeric: return "numeric-error";
  }
  return "numeric-error";
}

inline int exit_code(ErrorClass c) {
  switch (c) {
    case ErrorClass::success: return 0;
    case ErrorClass::config: return 2;
    case ErrorClass::data: return 3;
    case ErrorClass::checkpoint: return 4;
    case ErrorClass::numeric: return 5;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorClass c, const std::string& what) : std::runtime_error(what), class_(c) {}
  ErrorClass error_class() const noexcept { return class_; }

 private:
  ErrorClass class_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorClass::config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorClass::data, w) {}
};
struct CheckpointError : Error {
  explicit CheckpointError(const std::string& w) : Error(ErrorClass::checkpoint, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorClass::numeric, w) {}
};

// Precondition violations (bad shapes, out-of-domain arguments).
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace tncse
