// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dpdiff/tensor.hpp"

namespace dpdiff {

enum class Label : std::uint8_t { kNormal = 0, kAnomalous = 1 };
enum class Split { kTrain, kTest };

/// Per-image backbone features for every exported layer, plus ground truth.
struct FeatureRecord {
  std::uint32_t category_id = 0;
  Label label = Label::kNormal;
  std::uint16_t grid_h = 0;
  std::uint16_t grid_w = 0;
  std::uint16_t channels = 0;
  std::uint8_t layers = 0;
  std::uint16_t image_h = 0;
  std::uint16_t image_w = 0;
  /// layers x (grid_h * grid_w) x channels, layer-major then row-major tokens.
  std::vector<float> features;
  /// image_h x image_w, nonzero marks an anomalous pixel.
  std::vector<std::uint8_t> mask;

  std::size_t tokens() const { return static_cast<std::size_t>(grid_h) * grid_w; }
  std::span<const float> layer(std::size_t l) const;
  bool operator==(const FeatureRecord&) const = default;
};

struct Dataset {
  Split split = Split::kTrain;
  std::vector<FeatureRecord> records;
  std::map<std::uint32_t, std::string> category_index;

  /// Fills category_index with "category_<id>" for ids that lack a name.
  void index_categories();
};

/// Throws ValidationError when a record breaks the FeatureRecord invariants,
/// or when an anomalous record appears in a train split.
void validate_record(const FeatureRecord& record, Split split);

// DPFT container (little-endian):
//   "DPFT" | u32 version=1 | u32 record_count | records...
// record:
//   u32 category | u8 label | u16 h | u16 w | u16 C | u8 L | u16 H | u16 W
//   | f32[L*h*w*C] | u8[H*W] mask | u32 CRC-32 of everything before it
inline constexpr std::uint32_t kFeatureFileVersion = 1;

Dataset load_feature_file(const std::filesystem::path& path, Split split);
Dataset parse_feature_bytes(std::span<const std::uint8_t> bytes, Split split);
void write_feature_file(const std::filesystem::path& path, const Dataset& dataset);
std::vector<std::uint8_t> serialize_features(const Dataset& dataset);

/// Cross-layer mean pooling over the selected layers; returns [h*w x C].
Tensor aggregate_layers(const FeatureRecord& record, std::span<const std::size_t> selection);
/// Mean over every layer in the record.
Tensor aggregate_layers(const FeatureRecord& record);

/// Parameters of the synthetic multi-category token generator.
struct SynthSpec {
  std::uint32_t num_categories = 5;
  std::uint32_t centroids_per_category = 3;
  std::uint16_t grid_h = 14;
  std::uint16_t grid_w = 14;
  std::uint16_t channels = 16;
  std::uint8_t layers = 2;
  std::uint16_t image_h = 56;
  std::uint16_t image_w = 56;
  double centroid_scale = 1.0;
  double token_noise = 0.2;
  double anomaly_offset = 1.2;  // 6 * token_noise
  std::uint16_t rect_min = 2;
  std::uint16_t rect_max = 4;
  std::uint32_t train_per_category = 200;
  std::uint32_t test_normal_per_category = 40;
  std::uint32_t test_anomalous_per_category = 40;
  std::uint64_t seed = 0;

  /// Throws ConfigError when the spec is not usable.
  void validate() const;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  /// centroids[category][layer][centroid] is a C-vector.
  std::vector<std::vector<std::vector<std::vector<double>>>> centroids;
  /// Unit direction of the anomaly shift, shared by every layer.
  std::vector<double> anomaly_direction;
};

/// Which of a category's centroids occupies grid cell (row, col). Seed-independent.
std::uint32_t centroid_for_cell(std::uint32_t category, std::uint32_t row, std::uint32_t col,
                                std::uint32_t centroids_per_category);

SyntheticData generate_synthetic_dataset(const SynthSpec& spec);

}  // namespace dpdiff
