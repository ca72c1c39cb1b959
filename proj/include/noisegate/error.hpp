#pragma once

#include <stdexcept>
#include <string>

namespace noisegate {

// Base for everything the library throws on bad input or bad state.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files, inconsistent shapes, violated preconditions on data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced during training or gradient evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public NumericError {
 public:
  DivergenceError(int epoch, const std::string& what)
      : NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + what),
        epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace noisegate
