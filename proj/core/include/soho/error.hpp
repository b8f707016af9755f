// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace soho {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or feature dimensions that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition (non-scalar loss, stale assignment...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Class/target index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or configuration file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Negative sampling could not satisfy its constraints.
class SamplingError : public Error {
 public:
  using Error::Error;
};

/// Bad labels or dataset contents.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Bad command-line usage detected below the CLI layer.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed file. Carries the file name and the byte offset of the problem.
class FormatError : public Error {
 public:
  FormatError(std::string file, std::uint64_t offset, const std::string& what)
      : Error(file + " @ byte " + std::to_string(offset) + ": " + what),
        file_(std::move(file)),
        offset_(offset) {}

  const std::string& file() const noexcept { return file_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string file_;
  std::uint64_t offset_;
};

/// Training produced a non-finite value.
class NumericError : public Error {
 public:
  NumericError(std::int64_t batch_id, const std::string& what)
      : Error("batch " + std::to_string(batch_id) + ": " + what), batch_id_(batch_id) {}

  std::int64_t batch_id() const noexcept { return batch_id_; }

 private:
  std::int64_t batch_id_;
};

}  // namespace soho
