// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dpdiff/optim.hpp"
#include "dpdiff/tensor.hpp"

namespace dpdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;

  bool operator==(const CheckpointEntry&) const = default;
};

/// Named float64 arrays in file order.
struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

/// "DPCK" | version u32 | count u32 | entries | crc32 of everything before it.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);

/// Throws CorruptionError on a short file or checksum mismatch, FormatError on
/// bad magic and VersionError on an unsupported version.
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies the current values of `params`.
Checkpoint snapshot(const ParameterList& params);

/// Writes checkpoint values into `params`. Every name must be known
/// (VersionError otherwise) and every shape must match (LoadError naming the
/// parameter). Nothing is written unless the whole checkpoint checks out.
void load_parameters(const Checkpoint& checkpoint, ParameterList& params);

}  // namespace dpdiff
