// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dpdiff {

// Every threshold metric here uses one threshold per distinct score value and
// predicts positive at score >= threshold.

/// Mann-Whitney AUROC with midranks for ties. Needs both classes.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Step-interpolated average precision: sum_n (R_n - R_{n-1}) P_n.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Best F1 over thresholds; F1 is 0 when precision + recall is 0.
double f1_max(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Connected components of the nonzero pixels of a mask.
struct RegionSet {
  std::vector<std::vector<std::size_t>> regions;  // pixel indices, ascending
  int connectivity = 8;
};

/// Components in raster order of their first pixel. connectivity is 4 or 8.
RegionSet label_regions(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width,
                        int connectivity = 8);

/// A score map paired with its ground-truth mask.
struct ScoredMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> mask;
};

struct AuproOptions {
  double fpr_limit = 0.3;
  std::size_t max_thresholds = 256;
  bool exact = false;  // sweep every distinct score regardless of max_thresholds
  int connectivity = 8;
};

/// Area under the per-region-overlap vs false-positive-rate curve, anchored
/// at (0, 0), integrated by trapezoids up to fpr_limit and divided by it.
double aupro(const std::vector<ScoredMap>& maps, const AuproOptions& options = {});

/// The descending thresholds aupro() sweeps for a pooled set of scores.
std::vector<double> aupro_thresholds(std::vector<double> pooled, const AuproOptions& options);

/// The seven reported metrics.
struct MetricSummary {
  std::optional<double> image_auroc;
  std::optional<double> image_ap;
  std::optional<double> image_f1max;
  std::optional<double> pixel_auroc;
  std::optional<double> pixel_ap;
  std::optional<double> pixel_f1max;
  std::optional<double> pixel_aupro;
  std::optional<double> mad;

  std::array<std::optional<double>, 7> seven() const;
  /// Sets `mad` from the seven metrics.
  void finalize();
};

/// Unweighted mean of the seven metrics; ContractError if any is missing.
double mad(const std::array<std::optional<double>, 7>& seven);

struct MetricsReport {
  MetricSummary aggregate;
  std::map<std::string, MetricSummary> per_category;

  /// Aggregate = unweighted mean over categories of each metric.
  void aggregate_categories();
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

/// Per-category input: image scores and labels, plus the pixel maps.
struct CategoryScores {
  std::vector<double> image_scores;
  std::vector<std::uint8_t> image_labels;
  std::vector<ScoredMap> maps;
};

MetricSummary evaluate_category(const CategoryScores& scores, const AuproOptions& options = {});

}  // namespace dpdiff
