#pragma once

#include <stdexcept>
#include <string>

#include "attune/config.hpp"

ATTUNE_NAMESPACE_BEGIN

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not conform to an operation's requirements.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A computation produced, or would produce, a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A file or wire payload is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

ATTUNE_NAMESPACE_END
