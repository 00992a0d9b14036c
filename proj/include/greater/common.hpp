// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace greater {

using TokenId = std::int32_t;

/// Invalid or inconsistent settings (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset loading and parsing failures. Reported like config errors.
class DataError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Model load failures and model-side contract violations (exit code 3).
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Context does not fit the model window. Never silently truncated.
class WindowError : public ModelError {
 public:
  using ModelError::ModelError;
};

/// Non-finite loss or gradient during a step.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Half-open token range [begin, end) inside a sequence.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end == begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

}  // namespace greater
