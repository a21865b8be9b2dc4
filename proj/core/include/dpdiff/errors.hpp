// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dpdiff {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration or arguments. The CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad input data (files, checkpoints, records). The CLI maps these to exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ArgumentError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericalDomainError : public Error {
 public:
  using Error::Error;
};

class MetricUndefinedError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

/// Checkpoint contents do not fit the configured model.
class LoadError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace dpdiff
