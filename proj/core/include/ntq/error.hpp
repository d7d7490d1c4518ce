#pragma once

#include <stdexcept>
#include <string>

namespace ntq {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// Violated operation precondition (empty tape, non-scalar loss, ...).
struct ContractError : Error {
  using Error::Error;
};

// Bad caller-supplied data (out-of-range token ids, short files, ...).
struct InputError : Error {
  using Error::Error;
};

// Corrupt or inconsistent on-disk artifacts.
struct FormatError : Error {
  using Error::Error;
};

// Numerical failure (diverged training, Cholesky breakdown, ...).
struct NumericError : Error {
  using Error::Error;
};

// Invalid run configuration; message lists every violation.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace ntq
