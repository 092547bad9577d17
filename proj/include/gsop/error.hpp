#pragma once

#include <stdexcept>
#include <string>

namespace gsop {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, specs or config files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input for which the requested statistic is undefined (e.g. covariance of one sample).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Missing or truncated dataset/checkpoint files.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Well-formed file with invalid content (label out of range, bad magic).
class CorruptDataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  VersionError(unsigned found, unsigned expected)
      : Error("checkpoint version " + std::to_string(found) + " (expected " + std::to_string(expected) + ")"),
        found_(found),
        expected_(expected) {}
  unsigned found() const noexcept { return found_; }
  unsigned expected() const noexcept { return expected_; }

 private:
  unsigned found_;
  unsigned expected_;
};

}  // namespace gsop
