#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace edvae {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes or extents do not line up.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Math-domain violation (log of non-positive value, lgamma of x <= 0, ...).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

// Invalid argument to a sampler, schedule, or metric (tau <= 0, bad simplex).
class ParamError : public Error {
 public:
  explicit ParamError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent experiment configuration. CLI exit code 2.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Filesystem / format problems (bad CIFAR record size, truncated blob). Exit 4.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Training left the trainable regime: NaN/Inf or an explicit range-guard
// violation. Carries the iteration and the offending quantity. Exit 3.
class DivergenceError : public Error {
 public:
  DivergenceError(int64_t iteration, const std::string& quantity, const std::string& msg)
      : Error(msg), iteration_(iteration), quantity_(quantity) {}
  int64_t iteration() const { return iteration_; }
  const std::string& quantity() const { return quantity_; }

 private:
  int64_t iteration_;
  std::string quantity_;
};

}  // namespace edvae
