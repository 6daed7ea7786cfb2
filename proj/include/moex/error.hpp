#pragma once

#include <stdexcept>
#include <string>

namespace moex {

// Exit codes shared by every CLI command.
enum class ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kData)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, ExitCode::kNumeric) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class IllegalMoveError : public Error {
 public:
  explicit IllegalMoveError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class AmbiguousMoveError : public Error {
 public:
  explicit AmbiguousMoveError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, ExitCode::kData) {}
};

}  // namespace moex
