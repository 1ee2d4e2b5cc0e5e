#pragma once

#include <stdexcept>
#include <string>

namespace capslab {

// Base for all capslab errors. Subclasses map onto CLI exit codes:
// usage -> 2, missing input -> 3, numerical failure -> 4.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed arguments, bad config values, out-of-range requests.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Tensor shape disagreements; message names the offending axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Ingestion problems: bad magic, truncation, count mismatch.
class DataError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable files.
class IoError : public Error {
 public:
  using Error::Error;
};

// Divergence, NaN losses, failed numerical procedures.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace capslab
