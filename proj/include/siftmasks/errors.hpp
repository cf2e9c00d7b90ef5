#pragma once

#include <stdexcept>
#include <string>

namespace siftmasks {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input values: length mismatches, out-of-range labels, malformed files.
class DataError : public Error {
public:
    using Error::Error;
};

/// Fixed-point accumulation left the representable range.
class OverflowError : public DataError {
public:
    using DataError::DataError;
};

/// Invalid configuration or parameters supplied by the caller.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Deterministic replay or merge/unmerge bookkeeping did not reproduce
/// the expected bits. Exact unlearning is void once this is raised.
class ExactnessError : public Error {
public:
    using Error::Error;
};

}  // namespace siftmasks
