#pragma once

#include <stdexcept>
#include <string>

namespace toon {

// Base class for every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or size disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Non-finite values or a numerically undefined result.
struct NumericError : Error {
  using Error::Error;
};

// A caller violated a stated precondition.
struct ContractError : Error {
  using Error::Error;
};

// Malformed file contents (bad magic, bad header fields, ...).
struct FormatError : Error {
  using Error::Error;
};

// File ended before the payload announced by its header.
struct TruncationError : FormatError {
  using FormatError::FormatError;
};

// A container file is missing a required named record.
struct SchemaError : FormatError {
  using FormatError::FormatError;
};

// A metric has no defined value on the given inputs (e.g. empty mask).
struct MetricUndefinedError : NumericError {
  using NumericError::NumericError;
};

// Filesystem-level failure (open/read/write).
struct IoError : Error {
  using Error::Error;
};

}  // namespace toon
