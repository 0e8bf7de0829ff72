#pragma once

#include <stdexcept>
#include <string>

namespace coavt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated an operation's preconditions (bad shape, bad config, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor extents do not conform to a primitive's signature.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Filesystem or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A persisted file is malformed: wrong header/version, truncation, unknown record.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace coavt
