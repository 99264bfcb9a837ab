// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rsd {

// Error taxonomy. The process-level mapping is: config/shape/index -> 2,
// domain/numeric -> 3, I/O -> 4 (see exit_code_for and the C API).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// File-format violations (bad magic, truncation) are a flavor of I/O error.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return 4;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const DomainError*>(&e)) return 3;
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const ShapeError*>(&e)) return 2;
  if (dynamic_cast<const IndexError*>(&e)) return 2;
  return 1;
}

}  // namespace rsd
