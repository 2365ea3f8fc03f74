// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kunbr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to an op's signature.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad configuration, contract violation or precondition failure.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence, loss-ceiling aborts, ...
class NumericError : public Error {
 public:
  using Error::Error;
};

// File missing, truncated, corrupt or unwritable.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace kunbr
