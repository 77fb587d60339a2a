#pragma once

#include <stdexcept>
#include <string>

namespace lsst {

// Root of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree, or a dimension is not divisible as required.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A kernel produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// softmax over a row with no unmasked entry.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

// Token id, position or rank outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Collective misuse: mismatched calls, aborted group, timeout.
class CommError : public Error {
 public:
  using Error::Error;
};

// Invalid model, grid or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File-level failures: missing corpus, truncated checkpoint, bad report line.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace lsst
