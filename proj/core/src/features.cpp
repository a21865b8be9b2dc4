// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/features.hpp"

#include <algorithm>
#include <cmath>

#include "bytes.hpp"
#include "dpdiff/errors.hpp"
#include "dpdiff/rng.hpp"

namespace dpdiff {

std::span<const float> FeatureRecord::layer(std::size_t l) const {
  const std::size_t per_layer = tokens() * channels;
  return std::span<const float>(features).subspan(l * per_layer, per_layer);
}

void Dataset::index_categories() {
  for (const auto& r : records) {
    category_index.try_emplace(r.category_id, "category_" + std::to_string(r.category_id));
  }
}

void validate_record(const FeatureRecord& record, Split split) {
  if (record.grid_h == 0 || record.grid_w == 0 || record.channels == 0 || record.layers == 0) {
    throw ValidationError("record has an empty grid, channel or layer dimension");
  }
  const std::size_t expected = static_cast<std::size_t>(record.layers) * record.tokens() * record.channels;
  if (record.features.size() != expected) {
    throw ValidationError("record holds " + std::to_string(record.features.size()) + " feature values, expected " +
                          std::to_string(expected));
  }
  if (record.mask.size() != static_cast<std::size_t>(record.image_h) * record.image_w) {
    throw ValidationError("mask size does not match image dimensions");
  }
  if (record.label != Label::kNormal && record.label != Label::kAnomalous) {
    throw ValidationError("unknown label value " + std::to_string(static_cast<int>(record.label)));
  }
  if (record.label == Label::kNormal && std::any_of(record.mask.begin(), record.mask.end(), [](auto m) { return m; })) {
    throw ValidationError("normal record carries a nonzero mask");
  }
  if (split == Split::kTrain && record.label == Label::kAnomalous) {
    throw ValidationError("anomalous record in the train split");
  }
  for (float v : record.features) {
    if (!std::isfinite(v)) throw ValidationError("non-finite feature value");
  }
}

std::vector<std::uint8_t> serialize_features(const Dataset& dataset) {
  bytes::Writer out;
  out.put_string("DPFT");
  out.put<std::uint32_t>(kFeatureFileVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.records.size()));
  for (const auto& r : dataset.records) {
    const std::size_t start = out.size();
    out.put<std::uint32_t>(r.category_id);
    out.put<std::uint8_t>(static_cast<std::uint8_t>(r.label));
    out.put<std::uint16_t>(r.grid_h);
    out.put<std::uint16_t>(r.grid_w);
    out.put<std::uint16_t>(r.channels);
    out.put<std::uint8_t>(r.layers);
    out.put<std::uint16_t>(r.image_h);
    out.put<std::uint16_t>(r.image_w);
    for (float v : r.features) out.put<float>(v);
    out.put_bytes(r.mask);
    const auto crc = bytes::crc32_of(std::span(out.buffer()).subspan(start));
    out.put<std::uint32_t>(crc);
  }
  return std::move(out.buffer());
}

Dataset parse_feature_bytes(std::span<const std::uint8_t> data, Split split) {
  bytes::Reader in(data);
  auto magic = in.get_bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "DPFT")) throw FormatError("not a DPFT feature file (bad magic)");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kFeatureFileVersion) {
    throw FormatError("unsupported DPFT version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>("record count");
  Dataset dataset;
  dataset.split = split;
  dataset.records.reserve(std::min<std::size_t>(count, 1u << 16));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = in.pos();
    FeatureRecord r;
    r.category_id = in.get<std::uint32_t>("category");
    r.label = static_cast<Label>(in.get<std::uint8_t>("label"));
    r.grid_h = in.get<std::uint16_t>("grid height");
    r.grid_w = in.get<std::uint16_t>("grid width");
    r.channels = in.get<std::uint16_t>("channels");
    r.layers = in.get<std::uint8_t>("layers");
    r.image_h = in.get<std::uint16_t>("image height");
    r.image_w = in.get<std::uint16_t>("image width");
    const std::size_t n = static_cast<std::size_t>(r.layers) * r.tokens() * r.channels;
    if (in.remaining() < n * sizeof(float)) {
      throw IoError("truncated payload reading features of record " + std::to_string(i) + " at byte offset " +
                    std::to_string(in.pos()));
    }
    r.features.resize(n);
    for (auto& v : r.features) v = in.get<float>("features");
    auto mask = in.get_bytes(static_cast<std::size_t>(r.image_h) * r.image_w, "mask");
    r.mask.assign(mask.begin(), mask.end());
    const std::size_t end = in.pos();
    const auto stored = in.get<std::uint32_t>("record checksum");
    if (stored != bytes::crc32_of(data.subspan(start, end - start))) {
      throw CorruptionError("checksum mismatch in record " + std::to_string(i) + " at byte offset " +
                            std::to_string(start));
    }
    try {
      validate_record(r, split);
    } catch (const ValidationError& e) {
      throw ValidationError("record " + std::to_string(i) + ": " + e.what());
    }
    dataset.records.push_back(std::move(r));
  }
  if (in.remaining() != 0) {
    throw FormatError("trailing bytes after the last record at byte offset " + std::to_string(in.pos()));
  }
  dataset.index_categories();
  return dataset;
}

Dataset load_feature_file(const std::filesystem::path& path, Split split) {
  const auto data = bytes::read_file(path);
  return parse_feature_bytes(data, split);
}

void write_feature_file(const std::filesystem::path& path, const Dataset& dataset) {
  bytes::write_file(path, serialize_features(dataset));
}

Tensor aggregate_layers(const FeatureRecord& record, std::span<const std::size_t> selection) {
  if (selection.empty()) throw ArgumentError("aggregate_layers: empty layer selection");
  for (std::size_t l : selection) {
    if (l >= record.layers) {
      throw ArgumentError("aggregate_layers: layer " + std::to_string(l) + " out of range (record has " +
                          std::to_string(record.layers) + ")");
    }
  }
  const std::size_t n = record.tokens() * record.channels;
  std::vector<double> acc(n, 0.0);
  for (std::size_t l : selection) {
    auto values = record.layer(l);
    for (std::size_t i = 0; i < n; ++i) acc[i] += values[i];
  }
  const double inv = 1.0 / static_cast<double>(selection.size());
  for (double& v : acc) v *= inv;
  return Tensor::from({record.tokens(), record.channels}, std::move(acc));
}

Tensor aggregate_layers(const FeatureRecord& record) {
  std::vector<std::size_t> all(record.layers);
  for (std::size_t l = 0; l < all.size(); ++l) all[l] = l;
  return aggregate_layers(record, all);
}

// Synthetic data --------------------------------------------------------------

void SynthSpec::validate() const {
  if (num_categories == 0 || centroids_per_category == 0) throw ConfigError("synth: need at least one category and centroid");
  if (grid_h == 0 || grid_w == 0 || channels == 0 || layers == 0) throw ConfigError("synth: empty grid/channels/layers");
  if (image_h < grid_h || image_w < grid_w) throw ConfigError("synth: image must be at least as large as the token grid");
  if (train_per_category == 0 || test_normal_per_category == 0 || test_anomalous_per_category == 0) {
    throw ConfigError("synth: every split count must be at least 1");
  }
  if (rect_min == 0 || rect_min > rect_max) throw ConfigError("synth: invalid anomaly rectangle range");
  if (centroid_scale < 0.0 || token_noise < 0.0 || anomaly_offset < 0.0) {
    throw ConfigError("synth: scales must be non-negative");
  }
  // Noise-free specs are separable for any offset, including the degenerate zero one.
  if (token_noise > 0.0 && !(anomaly_offset > 3.0 * token_noise)) {
    throw ConfigError("synth: anomaly offset must exceed 3x token noise");
  }
}

std::uint32_t centroid_for_cell(std::uint32_t category, std::uint32_t row, std::uint32_t col,
                                std::uint32_t centroids_per_category) {
  std::uint64_t key = (static_cast<std::uint64_t>(category) << 40) ^ (static_cast<std::uint64_t>(row) << 20) ^ col;
  return static_cast<std::uint32_t>(splitmix64(key) % centroids_per_category);
}

namespace {

FeatureRecord synth_record(const SynthSpec& spec, const SyntheticData& world, std::uint32_t category,
                           bool anomalous, Rng rng) {
  FeatureRecord r;
  r.category_id = category;
  r.label = anomalous ? Label::kAnomalous : Label::kNormal;
  r.grid_h = spec.grid_h;
  r.grid_w = spec.grid_w;
  r.channels = spec.channels;
  r.layers = spec.layers;
  r.image_h = spec.image_h;
  r.image_w = spec.image_w;
  r.mask.assign(static_cast<std::size_t>(spec.image_h) * spec.image_w, 0);

  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t rect_h = 0;
  std::size_t rect_w = 0;
  if (anomalous) {
    const std::size_t max_h = std::min<std::size_t>(spec.rect_max, spec.grid_h);
    const std::size_t max_w = std::min<std::size_t>(spec.rect_max, spec.grid_w);
    const std::size_t min_h = std::min<std::size_t>(spec.rect_min, max_h);
    const std::size_t min_w = std::min<std::size_t>(spec.rect_min, max_w);
    rect_h = rng.uniform_int(min_h, max_h);
    rect_w = rng.uniform_int(min_w, max_w);
    top = rng.uniform_int(0, spec.grid_h - rect_h);
    left = rng.uniform_int(0, spec.grid_w - rect_w);
  }
  auto in_rect = [&](std::size_t row, std::size_t col) {
    return anomalous && row >= top && row < top + rect_h && col >= left && col < left + rect_w;
  };

  const std::size_t c = spec.channels;
  r.features.resize(static_cast<std::size_t>(spec.layers) * spec.grid_h * spec.grid_w * c);
  std::size_t idx = 0;
  for (std::size_t l = 0; l < spec.layers; ++l) {
    for (std::size_t row = 0; row < spec.grid_h; ++row) {
      for (std::size_t col = 0; col < spec.grid_w; ++col) {
        const auto j = centroid_for_cell(category, static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(col),
                                         spec.centroids_per_category);
        const auto& centroid = world.centroids[category][l][j];
        const bool shifted = in_rect(row, col);
        for (std::size_t f = 0; f < c; ++f) {
          double v = centroid[f] + spec.token_noise * rng.normal();
          if (shifted) v += spec.anomaly_offset * world.anomaly_direction[f];
          r.features[idx++] = static_cast<float>(v);
        }
      }
    }
  }
  if (anomalous) {
    for (std::size_t y = 0; y < spec.image_h; ++y) {
      const std::size_t row = y * spec.grid_h / spec.image_h;
      for (std::size_t x = 0; x < spec.image_w; ++x) {
        const std::size_t col = x * spec.grid_w / spec.image_w;
        if (in_rect(row, col)) r.mask[y * spec.image_w + x] = 1;
      }
    }
  }
  return r;
}

}  // namespace

SyntheticData generate_synthetic_dataset(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticData world;
  world.centroids.resize(spec.num_categories);
  for (auto& per_layer : world.centroids) {
    per_layer.resize(spec.layers);
    for (auto& per_centroid : per_layer) {
      per_centroid.resize(spec.centroids_per_category);
      for (auto& centroid : per_centroid) {
        centroid.resize(spec.channels);
        for (double& v : centroid) v = spec.centroid_scale * rng.normal();
      }
    }
  }
  world.anomaly_direction.resize(spec.channels);
  double norm = 0.0;
  while (norm == 0.0) {
    norm = 0.0;
    for (double& v : world.anomaly_direction) {
      v = rng.normal();
      norm += v * v;
    }
  }
  norm = std::sqrt(norm);
  for (double& v : world.anomaly_direction) v /= norm;

  world.train.split = Split::kTrain;
  world.test.split = Split::kTest;
  std::uint64_t stream = 0;
  for (std::uint32_t k = 0; k < spec.num_categories; ++k) {
    for (std::uint32_t i = 0; i < spec.train_per_category; ++i) {
      world.train.records.push_back(synth_record(spec, world, k, false, rng.derive(stream++)));
    }
  }
  for (std::uint32_t k = 0; k < spec.num_categories; ++k) {
    for (std::uint32_t i = 0; i < spec.test_normal_per_category; ++i) {
      world.test.records.push_back(synth_record(spec, world, k, false, rng.derive(stream++)));
    }
    for (std::uint32_t i = 0; i < spec.test_anomalous_per_category; ++i) {
      world.test.records.push_back(synth_record(spec, world, k, true, rng.derive(stream++)));
    }
  }
  world.train.index_categories();
  world.test.index_categories();
  return world;
}

}  // namespace dpdiff
