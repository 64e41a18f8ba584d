#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace segrag {

// Maps onto CLI exit codes: usage 2, data 3, divergence 4.
enum class ErrorKind { usage, data, divergence };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::uint64_t byte_offset)
      : DataError(what + " at byte " + std::to_string(byte_offset)), offset_(byte_offset) {}
  std::uint64_t byte_offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class DimensionError : public DataError {
 public:
  DimensionError(std::size_t expected, std::size_t actual)
      : DataError("dimension mismatch: expected " + std::to_string(expected) + ", got " +
                  std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}
  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, std::size_t batch)
      : Error(ErrorKind::divergence, "non-finite loss at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  int epoch_;
  std::size_t batch_;
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::divergence: return 4;
  }
  return 1;
}

}  // namespace segrag
