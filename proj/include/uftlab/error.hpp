// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace uftlab {

/// Coarse failure category. The CLI maps each category onto an exit status.
enum class ErrorCode {
  usage,    // bad flags or arguments
  io,       // file missing, unreadable, or malformed container
  data,     // dataset parse errors, invariant violations, schema mismatches
  numeric,  // non-finite losses
  shape,    // tensor conformance failures
  state,    // operation invalid in the current object state
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what)
      : Error(ErrorCode::shape, "shape mismatch: " + what) {}
};

class UnknownOpError : public Error {
 public:
  explicit UnknownOpError(const std::string& name)
      : Error(ErrorCode::usage, "unknown op: " + name) {}
};

class NonScalarLossError : public Error {
 public:
  NonScalarLossError() : Error(ErrorCode::shape, "loss node is not a scalar") {}
};

class DetachedNodeError : public Error {
 public:
  explicit DetachedNodeError(const std::string& what)
      : Error(ErrorCode::state, "detached node: " + what) {}
};

class OverflowError : public Error {
 public:
  OverflowError(std::size_t length, std::size_t limit)
      : Error(ErrorCode::data, "sequence of " + std::to_string(length) +
                                   " tokens exceeds context length " +
                                   std::to_string(limit)),
        length_(length),
        limit_(limit) {}

  [[nodiscard]] std::size_t length() const noexcept { return length_; }
  [[nodiscard]] std::size_t limit() const noexcept { return limit_; }

 private:
  std::size_t length_;
  std::size_t limit_;
};

class AdapterStateError : public Error {
 public:
  explicit AdapterStateError(const std::string& what)
      : Error(ErrorCode::state, what) {}
};

class EmptyBatchError : public Error {
 public:
  explicit EmptyBatchError(const std::string& where)
      : Error(ErrorCode::data, where + ": empty batch") {}
};

class ScoreRangeError : public Error {
 public:
  explicit ScoreRangeError(double score)
      : Error(ErrorCode::data,
              "score " + std::to_string(score) + " outside [0, 1]") {}
};

class NotTrainableError : public Error {
 public:
  explicit NotTrainableError(const std::string& what)
      : Error(ErrorCode::state, what) {}
};

/// Dataset ingestion failure. `line` is 1-based; 0 means "whole file".
class DataError : public Error {
 public:
  enum class Kind { parse, invariant, empty_file, schema_mismatch, count_exceeds_source };

  DataError(Kind kind, std::size_t line, std::string field, const std::string& what)
      : Error(ErrorCode::data, describe(kind, line, field, what)),
        kind_(kind),
        line_(line),
        field_(std::move(field)) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }
  [[nodiscard]] std::size_t line() const noexcept { return line_; }
  [[nodiscard]] const std::string& field() const noexcept { return field_; }

 private:
  static std::string describe(Kind kind, std::size_t line, const std::string& field,
                              const std::string& what) {
    std::string prefix;
    switch (kind) {
      case Kind::parse: prefix = "parse error"; break;
      case Kind::invariant: prefix = "invariant violation"; break;
      case Kind::empty_file: prefix = "empty file"; break;
      case Kind::schema_mismatch: prefix = "schema mismatch"; break;
      case Kind::count_exceeds_source: prefix = "count exceeds source"; break;
    }
    if (line > 0) prefix += " at line " + std::to_string(line);
    if (!field.empty()) prefix += " (field '" + field + "')";
    return what.empty() ? prefix : prefix + ": " + what;
  }

  Kind kind_;
  std::size_t line_;
  std::string field_;
};

class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(std::size_t step, double value)
      : Error(ErrorCode::numeric, "non-finite loss " + std::to_string(value) +
                                      " at step " + std::to_string(step)),
        step_(step) {}

  [[nodiscard]] std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Raised by multi-stage runs; keeps the category of the underlying failure.
class StageError : public Error {
 public:
  StageError(std::size_t stage, ErrorCode code, const std::string& what)
      : Error(code, "stage " + std::to_string(stage) + ": " + what), stage_(stage) {}

  [[nodiscard]] std::size_t stage() const noexcept { return stage_; }

 private:
  std::size_t stage_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::io, what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorCode::usage, what) {}
};

}  // namespace uftlab
