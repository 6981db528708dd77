#pragma once

#include <stdexcept>
#include <string>

namespace noisesearch {

// Base for every error raised by the library. Subclasses map onto the
// failure classes callers are expected to distinguish.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Operation undefined for the input (e.g. normalizing a constant tensor).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class TimeDomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Failure talking to an out-of-process verifier. Carries the raw payload
// (if any) that triggered it.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, std::string payload = {})
      : Error(payload.empty() ? what : what + " [payload: " + payload + "]"),
        payload_(std::move(payload)) {}

  const std::string& payload() const noexcept { return payload_; }

 private:
  std::string payload_;
};

}  // namespace noisesearch
