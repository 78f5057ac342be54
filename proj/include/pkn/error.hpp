// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace pkn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid layer, network, optimizer or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range or malformed numeric input (labels, distributions).
class InputError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Network surgery met a layer it cannot convert.
class ConversionError : public Error {
 public:
  using Error::Error;
};

/// On-disk data does not follow the expected file format.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CorruptRecordError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Internal invariant broken (optimizer buffers vs parameters, etc.).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace pkn
