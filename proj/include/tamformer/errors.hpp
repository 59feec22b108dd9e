#pragma once

#include <stdexcept>
#include <string>

namespace tamformer {

// Violated precondition or invariant. The CLI maps these to exit code 2.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Tensor shapes that cannot be combined.
class DimensionError : public ContractError {
 public:
  explicit DimensionError(const std::string& what) : ContractError(what) {}
};

// Anticipation time outside the observable query grid.
class RangeError : public ContractError {
 public:
  explicit RangeError(const std::string& what) : ContractError(what) {}
};

// File-level failures. The CLI maps these to exit code 3.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

class ParseError : public IoError {
 public:
  explicit ParseError(const std::string& what) : IoError(what) {}
};

class VersionError : public IoError {
 public:
  explicit VersionError(const std::string& what) : IoError(what) {}
};

// Loss became NaN during training.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

}  // namespace tamformer
