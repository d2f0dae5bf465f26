#pragma once

#include <stdexcept>
#include <string>

namespace fn2en {

// Exit-code mapping lives in the CLI: ConfigError -> 2, DataError/FormatError -> 3,
// NumericError -> 4. Everything else is a programming error and maps to 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad configuration: invalid specs, missing paths, unknown keys, mismatched shapes
// detected before any work starts.
struct ConfigError : Error {
    using Error::Error;
};

// Bad input data: manifests, labels out of range, empty folds.
struct DataError : Error {
    using Error::Error;
};

// Malformed serialized files: wrong magic, truncated payload, version mismatch.
struct FormatError : DataError {
    using DataError::DataError;
};

// Tensor shape violations raised by ops.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required (e.g. diverging loss).
struct NumericError : Error {
    using Error::Error;
};

// API misuse: backward on a non-scalar, attaching a head twice, epoch out of range.
struct ContractError : Error {
    using Error::Error;
};

}  // namespace fn2en
