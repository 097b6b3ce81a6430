#pragma once

#include <stdexcept>
#include <string>

namespace mtpd {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or feature shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller-supplied value outside its documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// An object used in a state it no longer supports (e.g. a stale tape).
class StateError : public Error {
 public:
  using Error::Error;
};

// Student/teacher feature shapes that no adapter can bridge.
class AdapterError : public Error {
 public:
  using Error::Error;
};

// Singular systems, divergence, non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable/unwritable files or corrupt binary payloads.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtpd
