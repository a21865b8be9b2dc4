// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "dpdiff/errors.hpp"
#include "dpdiff/features.hpp"

namespace dpdiff {
namespace {

namespace fs = std::filesystem;

SynthSpec small_spec() {
  SynthSpec s;
  s.num_categories = 2;
  s.centroids_per_category = 2;
  s.grid_h = 4;
  s.grid_w = 5;
  s.channels = 3;
  s.layers = 2;
  s.image_h = 8;
  s.image_w = 10;
  s.rect_min = 1;
  s.rect_max = 2;
  s.train_per_category = 3;
  s.test_normal_per_category = 1;
  s.test_anomalous_per_category = 1;
  s.seed = 5;
  return s;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "dpdiff_features_test";
  fs::create_directories(dir);
  return dir / name;
}

TEST(FeatureFile, EmptyDatasetLoads) {
  Dataset empty;
  empty.split = Split::kTest;
  auto path = temp_path("empty.dpft");
  write_feature_file(path, empty);
  auto loaded = load_feature_file(path, Split::kTest);
  EXPECT_TRUE(loaded.records.empty());
}

TEST(FeatureFile, RoundTripIsByteIdentical) {
  auto data = generate_synthetic_dataset(small_spec());
  auto bytes = serialize_features(data.test);
  auto parsed = parse_feature_bytes(bytes, Split::kTest);
  EXPECT_EQ(parsed.records, data.test.records);
  EXPECT_EQ(serialize_features(parsed), bytes);

  auto path = temp_path("rt.dpft");
  write_feature_file(path, data.test);
  auto reread = load_feature_file(path, Split::kTest);
  auto path2 = temp_path("rt2.dpft");
  write_feature_file(path2, reread);
  std::ifstream a(path, std::ios::binary);
  std::ifstream b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
}

TEST(FeatureFile, TenRecordFileMatchesGenerator) {
  auto spec = small_spec();
  spec.num_categories = 5;
  auto data = generate_synthetic_dataset(spec);
  ASSERT_EQ(data.test.records.size(), 10u);
  auto parsed = parse_feature_bytes(serialize_features(data.test), Split::kTest);
  ASSERT_EQ(parsed.records.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(parsed.records[i].grid_h, data.test.records[i].grid_h);
    EXPECT_EQ(parsed.records[i].grid_w, data.test.records[i].grid_w);
    EXPECT_EQ(parsed.records[i].label, data.test.records[i].label);
    EXPECT_EQ(parsed.records[i].mask, data.test.records[i].mask);
  }
}

TEST(FeatureFile, BadMagicIsFormatError) {
  auto bytes = serialize_features(generate_synthetic_dataset(small_spec()).train);
  bytes[0] = 'X';
  EXPECT_THROW(parse_feature_bytes(bytes, Split::kTrain), FormatError);
}

TEST(FeatureFile, BadVersionIsFormatError) {
  auto bytes = serialize_features(generate_synthetic_dataset(small_spec()).train);
  bytes[4] = 9;
  EXPECT_THROW(parse_feature_bytes(bytes, Split::kTrain), FormatError);
}

TEST(FeatureFile, TruncationIsIoErrorWithOffset) {
  auto bytes = serialize_features(generate_synthetic_dataset(small_spec()).train);
  bytes.resize(bytes.size() - 7);
  try {
    parse_feature_bytes(bytes, Split::kTrain);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
}

TEST(FeatureFile, FlippedPayloadByteIsCorruption) {
  auto bytes = serialize_features(generate_synthetic_dataset(small_spec()).train);
  bytes[40] ^= 0x5A;
  EXPECT_THROW(parse_feature_bytes(bytes, Split::kTrain), CorruptionError);
}

TEST(FeatureFile, AnomalousRecordInTrainSplitRejected) {
  auto data = generate_synthetic_dataset(small_spec());
  auto bytes = serialize_features(data.test);
  EXPECT_THROW(parse_feature_bytes(bytes, Split::kTrain), ValidationError);
}

TEST(FeatureFile, NonFiniteValueRejected) {
  auto data = generate_synthetic_dataset(small_spec());
  data.train.records[0].features[3] = std::nanf("");
  EXPECT_THROW(validate_record(data.train.records[0], Split::kTrain), ValidationError);
}

TEST(FeatureFile, MissingFileIsIoError) {
  EXPECT_THROW(load_feature_file(temp_path("does_not_exist.dpft"), Split::kTrain), IoError);
}

FeatureRecord two_layer_record(std::vector<float> a, std::vector<float> b) {
  FeatureRecord r;
  r.grid_h = 1;
  r.grid_w = 2;
  r.channels = 2;
  r.layers = 2;
  r.image_h = 2;
  r.image_w = 2;
  r.features = a;
  r.features.insert(r.features.end(), b.begin(), b.end());
  r.mask.assign(4, 0);
  return r;
}

TEST(AggregateLayers, SingleLayerUnchanged) {
  auto r = two_layer_record({1, 2, 3, 4}, {5, 6, 7, 8});
  std::vector<std::size_t> sel{1};
  auto x = aggregate_layers(r, sel);
  EXPECT_EQ(x.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<double>(x.data().begin(), x.data().end()), (std::vector<double>{5, 6, 7, 8}));
}

TEST(AggregateLayers, IdenticalLayersGiveSameLayer) {
  auto r = two_layer_record({1.5f, -2, 3, 4}, {1.5f, -2, 3, 4});
  auto x = aggregate_layers(r);
  EXPECT_EQ(std::vector<double>(x.data().begin(), x.data().end()), (std::vector<double>{1.5, -2, 3, 4}));
}

TEST(AggregateLayers, MeanOfTwoLayers) {
  auto r = two_layer_record({1, 2, 3, 4}, {2, 0.5f, -3, 10});
  auto x = aggregate_layers(r);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(x.data()[i], (static_cast<double>(r.features[i]) + r.features[4 + i]) / 2.0);
  }
}

TEST(AggregateLayers, BadSelectionRejected) {
  auto r = two_layer_record({1, 2, 3, 4}, {5, 6, 7, 8});
  std::vector<std::size_t> none;
  std::vector<std::size_t> out_of_range{2};
  EXPECT_THROW(aggregate_layers(r, none), ArgumentError);
  EXPECT_THROW(aggregate_layers(r, out_of_range), ArgumentError);
}

TEST(AggregateLayers, CommutesWithTokenPermutation) {
  auto r = two_layer_record({1, 2, 3, 4}, {5, 6, 7, 8});
  auto swapped = two_layer_record({3, 4, 1, 2}, {7, 8, 5, 6});
  auto a = aggregate_layers(r);
  auto b = aggregate_layers(swapped);
  EXPECT_EQ(a.at(0, 0), b.at(1, 0));
  EXPECT_EQ(a.at(0, 1), b.at(1, 1));
  EXPECT_EQ(a.at(1, 0), b.at(0, 0));
}

TEST(Synthetic, SameSeedBitIdentical) {
  auto a = generate_synthetic_dataset(small_spec());
  auto b = generate_synthetic_dataset(small_spec());
  EXPECT_EQ(a.train.records, b.train.records);
  EXPECT_EQ(a.test.records, b.test.records);
}

TEST(Synthetic, DegenerateSpecMakesAnomaliesEqualNormals) {
  auto spec = small_spec();
  spec.anomaly_offset = 0.0;
  spec.token_noise = 0.0;
  EXPECT_NO_THROW(spec.validate());
  auto data = generate_synthetic_dataset(spec);
  const FeatureRecord* normal = nullptr;
  const FeatureRecord* anomalous = nullptr;
  for (const auto& r : data.test.records) {
    if (r.category_id != 0) continue;
    (r.label == Label::kNormal ? normal : anomalous) = &r;
  }
  ASSERT_TRUE(normal && anomalous);
  EXPECT_EQ(normal->features, anomalous->features);
  EXPECT_GT(std::count(anomalous->mask.begin(), anomalous->mask.end(), 1), 0);
}

TEST(Synthetic, CellMeanConvergesToCentroid) {
  SynthSpec spec;
  spec.num_categories = 1;
  spec.grid_h = 2;
  spec.grid_w = 2;
  spec.layers = 1;
  spec.image_h = 2;
  spec.image_w = 2;
  spec.rect_min = 1;
  spec.rect_max = 1;
  spec.train_per_category = 10000;
  auto data = generate_synthetic_dataset(spec);
  const std::uint32_t j = centroid_for_cell(0, 1, 0, spec.centroids_per_category);
  const auto& centroid = data.centroids[0][0][j];
  const double n = static_cast<double>(spec.train_per_category);
  const double bound = 3.0 * spec.token_noise / std::sqrt(n);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    double s = 0.0;
    for (const auto& r : data.train.records) s += r.features[2 * spec.channels + c];  // token (1, 0)
    EXPECT_NEAR(s / n, centroid[c], bound + 1e-6) << "channel " << c;
  }
}

TEST(Synthetic, MaskAreaWithinRectangleBounds) {
  SynthSpec spec;
  spec.train_per_category = 1;
  auto data = generate_synthetic_dataset(spec);
  const std::size_t max_area = static_cast<std::size_t>(spec.rect_max) * spec.rect_max *
                               (spec.image_h / spec.grid_h) * (spec.image_w / spec.grid_w);
  for (const auto& r : data.test.records) {
    const auto area = static_cast<std::size_t>(std::count(r.mask.begin(), r.mask.end(), 1));
    if (r.label == Label::kAnomalous) {
      EXPECT_GE(area, 1u);
      EXPECT_LE(area, max_area);
    } else {
      EXPECT_EQ(area, 0u);
    }
  }
  for (const auto& r : data.train.records) EXPECT_EQ(r.label, Label::kNormal);
}

TEST(Synthetic, DefaultCountsAndOrdering) {
  auto data = generate_synthetic_dataset(SynthSpec{});
  EXPECT_EQ(data.train.records.size(), 1000u);
  EXPECT_EQ(data.test.records.size(), 400u);
  EXPECT_EQ(data.test.records[0].label, Label::kNormal);
  EXPECT_EQ(data.test.records[40].label, Label::kAnomalous);
  EXPECT_EQ(data.test.records[80].category_id, 1u);
}

TEST(Synthetic, TooSmallOffsetRejected) {
  auto spec = small_spec();
  spec.anomaly_offset = 3.0 * spec.token_noise;
  EXPECT_THROW(spec.validate(), ConfigError);
}

}  // namespace
}  // namespace dpdiff
