#pragma once

#include <stdexcept>
#include <string>

namespace gpsurr {

/// Bad caller input: wrong dimensions, out-of-range values, unknown names.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent data (CSV rows, datasets, run invariants).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Factorization or optimizer failure.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Model file that fails to parse or whose checksum does not match.
class CorruptFile : public IoError {
public:
    using IoError::IoError;
};

class VersionMismatch : public IoError {
public:
    using IoError::IoError;
};

} // namespace gpsurr
