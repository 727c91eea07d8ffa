#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace embseg {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes that cannot be combined by the named op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Numeric argument outside an op's domain (log of non-positive, tau <= 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Vectors of unequal dimension where equal dimension is required.
class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

// Zero-norm or non-finite embedding.
class InvalidEmbedding : public Error {
 public:
  using Error::Error;
};

// Malformed input file; carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A loss term was asked for with nothing to supervise (M = 0 or P = 0).
class EmptySupervision : public Error {
 public:
  using Error::Error;
};

// No loss term present in a batch.
class EmptyBatch : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in a gradient or loss.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// A metric with no defined value (e.g. mIoU over all-ignore ground truth).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Config schema violation; lists every offending key.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out = "invalid config:";
    for (const auto& p : items) out += "\n  " + p;
    return out;
  }
  std::vector<std::string> problems_;
};

}  // namespace embseg
