#pragma once

#include <stdexcept>
#include <string>

namespace dman {

// Raised on invalid arguments, shapes and configuration. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A softmax row with every entry masked out.
class DegenerateMaskError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class EmptyMemoryError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Segments processed out of order, or state consumed before it exists.
class SequencingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Runtime failures: non-finite losses, I/O, corrupted checkpoints. Exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dman
