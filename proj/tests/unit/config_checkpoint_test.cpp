// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "dpdiff/checkpoint.hpp"
#include "dpdiff/config.hpp"
#include "dpdiff/errors.hpp"
#include "dpdiff/harness.hpp"

namespace dpdiff {
namespace {

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(RunConfig{}.validate()); }

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.seed = 17;
  c.lr = 3e-3;
  c.sampler = Sampler::kDdpm;
  c.sinkhorn_epsilon = 0.25;
  c.layers = {0, 1};
  c.synth.num_categories = 2;
  const auto text = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(text)), text);
}

TEST(Config, UnknownKeyRejected) {
  EXPECT_THROW(config_from_json(R"({"learning_rate": 0.1})"), ConfigError);
}

TEST(Config, InvariantsEnforced) {
  EXPECT_THROW(config_from_json(R"({"lambda_local": -1})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"batch_size": 0})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"t_fix": 1001})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"ddim_steps": 0})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"seed": -3})"), ConfigError);
  EXPECT_THROW(config_from_json("{not json"), ConfigError);
}

TEST(Config, DefaultsDumpMarksSources) {
  auto dump = nlohmann::json::parse(config_defaults_dump());
  EXPECT_EQ(dump["lambda_local"]["value"], 0.2);
  EXPECT_EQ(dump["lambda_local"]["source"], "reported setting");
  EXPECT_EQ(dump["batch_size"]["value"], 32);
  EXPECT_EQ(dump["t_fix"]["source"], "artifact default");
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.entries.push_back({"a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}});
  c.entries.push_back({"a.bias", {3}, {-0.5, 0.0, 1e-300}});
  return c;
}

TEST(Checkpoint, ByteRoundTrip) {
  auto c = sample_checkpoint();
  auto bytes = serialize_checkpoint(c);
  EXPECT_EQ(parse_checkpoint(bytes), c);
}

TEST(Checkpoint, CorruptionAndTruncation) {
  auto bytes = serialize_checkpoint(sample_checkpoint());
  auto flipped = bytes;
  flipped[20] ^= 1;
  EXPECT_THROW(parse_checkpoint(flipped), CorruptionError);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(parse_checkpoint(truncated), CorruptionError);
}

TEST(Checkpoint, LoadIntoModelIsAllOrNothing) {
  RunConfig cfg;
  cfg.depth = 1;
  Model m = Model::create(cfg, 16);
  auto params = m.parameters();
  Checkpoint c = snapshot(params);
  c.entries[0].data[0] += 1.0;
  c.entries.back().shape = {1};
  c.entries.back().data = {0.0};
  const double before = params[0].tensor[0];
  try {
    load_parameters(c, params);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find(c.entries.back().name), std::string::npos) << e.what();
  }
  EXPECT_EQ(params[0].tensor[0], before);
}

TEST(Checkpoint, UnknownNameIsVersionError) {
  RunConfig cfg;
  cfg.depth = 1;
  Model m = Model::create(cfg, 16);
  auto params = m.parameters();
  Checkpoint c = snapshot(params);
  c.entries.push_back({"mystery", {1}, {0.0}});
  EXPECT_THROW(load_parameters(c, params), VersionError);
}

TEST(Checkpoint, ModelRoundTripThroughFile) {
  RunConfig cfg;
  cfg.depth = 2;
  Model m = Model::create(cfg, 16);
  auto path = std::filesystem::temp_directory_path() / "dpdiff_model_rt.dpck";
  write_checkpoint(path, m.to_checkpoint());
  Model back = Model::from_checkpoint(read_checkpoint(path), cfg);
  EXPECT_EQ(back.to_checkpoint(), m.to_checkpoint());

  RunConfig other = cfg;
  other.depth = 3;
  EXPECT_THROW(Model::from_checkpoint(read_checkpoint(path), other), LoadError);
}

}  // namespace
}  // namespace dpdiff
