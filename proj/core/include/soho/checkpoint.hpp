// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

enum class DType : std::uint8_t { kF64 = 0, kU64 = 1 };

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::kF64;
  std::vector<Real> f64;
  std::vector<std::uint64_t> u64;

  std::uint64_t elements() const;
  bool operator==(const TensorRecord&) const = default;
};

/// File layout, all integers little-endian:
///   "SOHO" | u32 version | u32 tensor count | tensor records
///   | "OPTM" u64 len, u32 count, tensor records
///   | "RNGS" u64 len, text | "CONF" u64 len, text | "STAT" u64 len, text
/// A tensor record is u32 name length, name bytes, u32 rank, u64 dims,
/// u8 dtype, payload.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<TensorRecord> tensors;
  std::vector<TensorRecord> optimizer;
  std::string rng;
  std::string config;
  std::string state;

  const TensorRecord& tensor(const std::string& name) const;
  const TensorRecord& optimizer_tensor(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

TensorRecord make_record(const std::string& name, const Tensor& t);
TensorRecord make_record(const std::string& name, std::vector<std::uint64_t> dims, std::vector<Real> values);
TensorRecord make_record(const std::string& name, std::vector<std::uint64_t> values);

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError with the byte offset of bad magic, version or truncation.
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "<memory>");

/// Writes to a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace soho
