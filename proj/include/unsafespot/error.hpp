#pragma once

#include <stdexcept>
#include <string>

namespace unsafespot {

// Validation errors are caused by bad input (exit code 2 from the CLI);
// runtime errors by a failure while processing valid input (exit code 1).
enum class ErrorKind { Validation, Runtime };

/// Error carrying a module-qualified code such as "corpus.DuplicateFunction".
class Error : public std::runtime_error {
public:
  Error(std::string code, const std::string& message,
        ErrorKind kind = ErrorKind::Validation)
      : std::runtime_error(code + ": " + message), code_(std::move(code)),
        kind_(kind) {}

  const std::string& code() const noexcept { return code_; }
  ErrorKind kind() const noexcept { return kind_; }

private:
  std::string code_;
  ErrorKind kind_;
};

}  // namespace unsafespot
