#pragma once

#include <stdexcept>
#include <string>

namespace lgf {

// Base for every error the toolkit raises. `kind()` is a short stable tag used
// by the CLI when printing machine-parseable error lines.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

class InputError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "input"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

// Emits a one-line warning on std::clog.
void log_warning(const std::string& message);

}  // namespace lgf
