// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/checkpoint.hpp"

#include <algorithm>
#include <limits>
#include <map>

#include "bytes.hpp"
#include "dpdiff/errors.hpp"

namespace dpdiff {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'D', 'P', 'C', 'K'};

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
  bytes::Writer w;
  w.put_bytes(kMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& e : checkpoint.entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ArgumentError("checkpoint: parameter name too long: " + e.name.substr(0, 64));
    }
    if (e.shape.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw ArgumentError("checkpoint: rank too large for " + e.name);
    }
    if (shape_numel(e.shape) != e.data.size()) {
      throw ArgumentError("checkpoint: " + e.name + " has " + std::to_string(e.data.size()) +
                          " values for shape " + shape_str(e.shape));
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_string(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : e.data) w.put<double>(v);
  }
  const std::uint32_t crc = bytes::crc32_of(w.buffer());
  w.put<std::uint32_t>(crc);
  return std::move(w.buffer());
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> data) {
  constexpr std::size_t kMinSize = 4 + 4 + 4 + 4;
  if (data.size() < kMinSize) {
    throw CorruptionError("checkpoint is truncated: " + std::to_string(data.size()) + " bytes");
  }
  const auto body = data.first(data.size() - 4);
  bytes::Reader tail(data.last(4));
  const auto stored = tail.get<std::uint32_t>("checksum");
  if (stored != bytes::crc32_of(body)) throw CorruptionError("checkpoint checksum mismatch (truncated or damaged file)");

  bytes::Reader r(body);
  try {
    const auto magic = r.get_bytes(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) throw FormatError("not a DPCK checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
      throw VersionError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>("parameter count");
    Checkpoint out;
    out.entries.reserve(std::min<std::size_t>(count, 4096));
    for (std::uint32_t i = 0; i < count; ++i) {
      CheckpointEntry e;
      const auto name_len = r.get<std::uint16_t>("name length");
      const auto name = r.get_bytes(name_len, "name");
      e.name.assign(name.begin(), name.end());
      const auto rank = r.get<std::uint8_t>("rank");
      for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint32_t>("dimension"));
      const std::size_t n = shape_numel(e.shape);
      if (n > r.remaining() / sizeof(double)) {
        throw CorruptionError("checkpoint entry '" + e.name + "' claims more data than the file holds");
      }
      e.data.resize(n);
      for (auto& v : e.data) v = r.get<double>("parameter data");
      out.entries.push_back(std::move(e));
    }
    if (r.remaining() != 0) throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
    return out;
  } catch (const IoError& e) {
    throw CorruptionError(std::string("checkpoint: ") + e.what());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  bytes::write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(bytes::read_file(path)); }

Checkpoint snapshot(const ParameterList& params) {
  Checkpoint out;
  out.entries.reserve(params.size());
  for (const auto& p : params) {
    const auto values = p.tensor.data();
    out.entries.push_back({p.name, p.tensor.shape(), std::vector<double>(values.begin(), values.end())});
  }
  return out;
}

void load_parameters(const Checkpoint& checkpoint, ParameterList& params) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.size(); ++i) index[params[i].name] = i;
  std::vector<bool> seen(params.size(), false);
  for (const auto& e : checkpoint.entries) {
    auto it = index.find(e.name);
    if (it == index.end()) throw VersionError("checkpoint has unknown parameter '" + e.name + "'");
    const auto& target = params[it->second].tensor;
    if (target.shape() != e.shape) {
      throw LoadError("parameter '" + e.name + "' has shape " + shape_str(e.shape) + " in the checkpoint but " +
                      shape_str(target.shape()) + " in the model");
    }
    if (seen[it->second]) throw LoadError("parameter '" + e.name + "' appears twice in the checkpoint");
    seen[it->second] = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen[i]) throw LoadError("checkpoint is missing parameter '" + params[i].name + "'");
  }
  for (const auto& e : checkpoint.entries) {
    auto dst = params[index[e.name]].tensor.mutable_data();
    std::copy(e.data.begin(), e.data.end(), dst.begin());
  }
}

}  // namespace dpdiff
