#pragma once

#include <stdexcept>
#include <string>

namespace esnfb {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Caller violated a precondition (bad dimensions, invalid argument).
struct UsageError : Error {
    using Error::Error;
};

/// Input data could not be read or parsed.
struct DataError : Error {
    using Error::Error;
};

/// A computation produced non-finite values or failed to converge.
struct NumericError : Error {
    using Error::Error;
};

/// Target sequence has zero variance; normalized errors are undefined.
struct DegenerateError : NumericError {
    using NumericError::NumericError;
};

/// The spectral projection cannot control a singular direction
/// (|B' Abar u| ~ 0); callers shrink the step and retry.
struct ProjectionSingularError : NumericError {
    using NumericError::NumericError;
};

}  // namespace esnfb
