#pragma once

#include <stdexcept>
#include <string>

namespace coarseseg {

// Every error carries a short machine-greppable code. The CLI maps
// ValidationError to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what,
                           std::string code = "E_VALIDATION")
      : Error(std::move(code), what) {}
};

class ShapeError : public ValidationError {
 public:
  explicit ShapeError(const std::string& what)
      : ValidationError(what, "E_SHAPE") {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what, std::string code = "E_IO")
      : Error(std::move(code), what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error("E_NUMERIC", what) {}
};

}  // namespace coarseseg
