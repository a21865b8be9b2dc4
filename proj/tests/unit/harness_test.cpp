// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "dpdiff/errors.hpp"
#include "dpdiff/harness.hpp"

namespace dpdiff {
namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.synth.num_categories = 2;
  c.synth.grid_h = 6;
  c.synth.grid_w = 6;
  c.synth.channels = 8;
  c.synth.image_h = 12;
  c.synth.image_w = 12;
  c.synth.rect_min = 1;
  c.synth.rect_max = 2;
  c.synth.train_per_category = 8;
  c.synth.test_normal_per_category = 3;
  c.synth.test_anomalous_per_category = 3;
  c.local_prototypes = 3;
  c.global_prototypes = 2;
  c.prototype_heads = 2;
  c.depth = 1;
  c.heads = 2;
  c.time_freq_dim = 8;
  c.batch_size = 4;
  c.epochs = 1;
  c.lr = 1e-3;
  c.t_fix = 50;
  c.pool_kernel = 2;
  return c;
}

TEST(Training, TotalLossIdentityEveryStep) {
  RunConfig cfg = tiny_config();
  auto data = load_run_data(cfg);
  auto result = train_model(cfg, data.train);
  ASSERT_EQ(result.log.steps.size(), 4u);
  for (const auto& s : result.log.steps) {
    const double expect = s.l_diff + cfg.lambda_local * s.l_local + cfg.lambda_global * s.l_global;
    EXPECT_NEAR(s.total, expect, 1e-10) << "step " << s.step;
  }
}

TEST(Training, ZeroLambdasLogOnlyDiffusion) {
  RunConfig cfg = tiny_config();
  cfg.lambda_local = 0.0;
  cfg.lambda_global = 0.0;
  auto data = load_run_data(cfg);
  auto result = train_model(cfg, data.train);
  for (const auto& s : result.log.steps) {
    EXPECT_EQ(s.l_local, 0.0);
    EXPECT_EQ(s.l_global, 0.0);
    EXPECT_EQ(s.total, s.l_diff);
  }
}

TEST(Training, ZeroEpochsKeepsInitialization) {
  RunConfig cfg = tiny_config();
  cfg.epochs = 0;
  auto data = load_run_data(cfg);
  auto result = train_model(cfg, data.train);
  EXPECT_TRUE(result.log.steps.empty());
  EXPECT_EQ(result.model.to_checkpoint(), Model::create(cfg, cfg.synth.channels).to_checkpoint());
}

TEST(Training, MaxStepsCapsRun) {
  RunConfig cfg = tiny_config();
  cfg.epochs = 10;
  cfg.max_steps = 3;
  auto data = load_run_data(cfg);
  EXPECT_EQ(train_model(cfg, data.train).log.steps.size(), 3u);
}

TEST(Training, DeterministicLog) {
  RunConfig cfg = tiny_config();
  auto data = load_run_data(cfg);
  auto a = train_model(cfg, data.train);
  auto b = train_model(cfg, data.train);
  EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
  EXPECT_EQ(a.log.to_csv().rfind("step,l_diff,l_local,l_global,total\n", 0), 0u);
}

TEST(Training, DivergenceReportsStep) {
  RunConfig cfg = tiny_config();
  cfg.lr = 1e300;
  cfg.epochs = 5;
  auto data = load_run_data(cfg);
  try {
    train_model(cfg, data.train);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Evaluation, UntrainedModelGivesMetricsInRange) {
  RunConfig cfg = tiny_config();
  auto data = load_run_data(cfg);
  Model m = Model::create(cfg, cfg.synth.channels);
  auto ev = evaluate_model(m, data.test, cfg);
  EXPECT_EQ(ev.records.size(), data.test.records.size());
  EXPECT_EQ(ev.report.per_category.size(), 2u);
  for (const auto& v : ev.report.aggregate.seven()) {
    ASSERT_TRUE(v.has_value());
    EXPECT_GE(*v, 0.0);
    EXPECT_LE(*v, 1.0);
  }
  EXPECT_GT(ev.records[0].map.image_score, 0.0);
}

TEST(Evaluation, WorkerCountDoesNotChangeReport) {
  RunConfig cfg = tiny_config();
  auto data = load_run_data(cfg);
  Model m = train_model(cfg, data.train).model;
  RunConfig par = cfg;
  par.eval_workers = 3;
  EXPECT_EQ(evaluate_model(m, data.test, cfg).report.to_json(), evaluate_model(m, data.test, par).report.to_json());
}

TEST(Evaluation, ExportedMapsReproduceReport) {
  RunConfig cfg = tiny_config();
  auto data = load_run_data(cfg);
  Model m = train_model(cfg, data.train).model;
  auto ev = evaluate_model(m, data.test, cfg);
  auto dir = std::filesystem::temp_directory_path() / "dpdiff_export_test";
  std::filesystem::remove_all(dir);
  export_maps(ev, data.test, dir);
  EXPECT_EQ(metrics_from_exported_maps(dir, aupro_options(cfg)).to_json(), ev.report.to_json());
}

}  // namespace
}  // namespace dpdiff
