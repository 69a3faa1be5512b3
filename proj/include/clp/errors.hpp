#pragma once

#include <stdexcept>
#include <string>

namespace clp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape conformance failures.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Function evaluated outside its domain (log of non-positive, sqrt of negative).
class DomainError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed at an op boundary.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InfeasibleError : public Error {
 public:
  using Error::Error;
};

class AugmentError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace clp
