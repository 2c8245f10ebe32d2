#pragma once

#include <stdexcept>
#include <string>

namespace exuseg {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

// Raised whenever a public operation would produce NaN or Inf.
class NonFiniteError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

// Unreadable or unsupported file contents (bad magic, undecodable image).
class FormatError : public Error {
public:
  using Error::Error;
};

// Checksum mismatch or truncated container.
class CorruptionError : public FormatError {
public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
  using FormatError::FormatError;
};

// Error raised inside a model layer, tagged with the layer's position in the stack.
class LayerError : public Error {
public:
  LayerError(std::size_t index, const std::string& what)
      : Error("layer " + std::to_string(index) + ": " + what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

private:
  std::size_t index_;
};

}  // namespace exuseg
