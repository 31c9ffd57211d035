#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ringformer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model, task, training or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or an undefined numeric result.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::int64_t step) : NumericError(what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointNameError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Two analysis inputs that cannot be compared, or a similarity that is undefined.
class AnalysisError : public Error {
 public:
  using Error::Error;
};

}  // namespace ringformer
