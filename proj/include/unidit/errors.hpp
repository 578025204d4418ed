#pragma once

#include <stdexcept>
#include <string>

namespace unidit {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents or widths that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied values out of range (ids, t, empty inputs, unknown names).
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Structural precondition between components was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace unidit
