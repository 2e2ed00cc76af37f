#pragma once

#include <stdexcept>
#include <string>

namespace mspm {

// Bad shapes, axes, indices or configuration values.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// backward() on a tensor that was never recorded on a tape.
class NoGraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Optimizer step on a trainable tensor without a gradient buffer.
class NoGradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Stored tensor or feature dimension disagrees with what the model expects.
class DimensionMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unrecognized magic, version or syntax in an input file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File ended before the declared payload was read.
class CorruptFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mspm
