#pragma once

#include <stdexcept>
#include <string>

namespace nif {

// Root of every error raised by the library. Subclasses name the failure
// kind so callers (and the CLI's exit-code mapping) can dispatch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedNumeral : public Error {
 public:
  using Error::Error;
};
class NonTerminatingDecimal : public Error {
 public:
  using Error::Error;
};
class DivisionByZero : public Error {
 public:
  using Error::Error;
};
class SamplerExhausted : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};
class IndexOutOfVocab : public Error {
 public:
  using Error::Error;
};
class NotScalar : public Error {
 public:
  using Error::Error;
};
class NoTape : public Error {
 public:
  using Error::Error;
};
class NonFinite : public Error {
 public:
  using Error::Error;
};
class SequenceTooLong : public Error {
 public:
  using Error::Error;
};
class VersionMismatch : public Error {
 public:
  using Error::Error;
};
class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};
class LengthMismatch : public Error {
 public:
  using Error::Error;
};
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace nif
