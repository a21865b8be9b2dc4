// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include <json.hpp>

#include "dpdiff/errors.hpp"

namespace dpdiff {

namespace {

struct Group {
  double score;
  std::size_t pos;
  std::size_t neg;
};

void check_inputs(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* metric) {
  if (scores.size() != labels.size()) {
    throw DimensionError(std::string(metric) + ": " + std::to_string(scores.size()) + " scores but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw MetricUndefinedError(std::string(metric) + ": empty input");
  for (double s : scores) {
    if (std::isnan(s)) throw ArgumentError(std::string(metric) + ": NaN score");
  }
}

// Distinct scores in descending order with per-class counts.
std::vector<Group> descending_groups(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Group> groups;
  for (std::size_t idx : order) {
    if (groups.empty() || groups.back().score != scores[idx]) groups.push_back({scores[idx], 0, 0});
    if (labels[idx]) {
      ++groups.back().pos;
    } else {
      ++groups.back().neg;
    }
  }
  return groups;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "auroc");
  auto groups = descending_groups(scores, labels);
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  for (const auto& g : groups) {
    n_pos += g.pos;
    n_neg += g.neg;
  }
  if (n_pos == 0 || n_neg == 0) throw MetricUndefinedError("auroc: needs both positive and negative samples");
  // Ascending midranks; tied scores share the mean of their rank span.
  double rank_sum = 0.0;
  double next_rank = 1.0;
  for (auto it = groups.rbegin(); it != groups.rend(); ++it) {
    const double size = static_cast<double>(it->pos + it->neg);
    const double midrank = next_rank + (size - 1.0) / 2.0;
    rank_sum += static_cast<double>(it->pos) * midrank;
    next_rank += size;
  }
  const double p = static_cast<double>(n_pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "average_precision");
  const auto groups = descending_groups(scores, labels);
  std::size_t n_pos = 0;
  for (const auto& g : groups) n_pos += g.pos;
  if (n_pos == 0) throw MetricUndefinedError("average_precision: no positive samples");
  std::size_t tp = 0;
  std::size_t fp = 0;
  double ap = 0.0;
  double prev_recall = 0.0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

double f1_max(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "f1_max");
  const auto groups = descending_groups(scores, labels);
  std::size_t n_pos = 0;
  for (const auto& g : groups) n_pos += g.pos;
  if (n_pos == 0) throw MetricUndefinedError("f1_max: no positive samples");
  std::size_t tp = 0;
  std::size_t fp = 0;
  double best = 0.0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    best = std::max(best, f1);
  }
  return best;
}

RegionSet label_regions(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width,
                        int connectivity) {
  if (connectivity != 4 && connectivity != 8) throw ArgumentError("label_regions: connectivity must be 4 or 8");
  if (mask.size() != height * width) throw DimensionError("label_regions: mask size does not match dimensions");
  RegionSet out;
  out.connectivity = connectivity;
  std::vector<bool> seen(mask.size(), false);
  std::deque<std::size_t> frontier;
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    std::vector<std::size_t> region;
    seen[start] = true;
    frontier.push_back(start);
    while (!frontier.empty()) {
      const std::size_t p = frontier.front();
      frontier.pop_front();
      region.push_back(p);
      const auto y = static_cast<std::ptrdiff_t>(p / width);
      const auto x = static_cast<std::ptrdiff_t>(p % width);
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (connectivity == 4 && dy != 0 && dx != 0) continue;
          const std::ptrdiff_t ny = y + dy;
          const std::ptrdiff_t nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const auto q = static_cast<std::size_t>(ny * w + nx);
          if (mask[q] && !seen[q]) {
            seen[q] = true;
            frontier.push_back(q);
          }
        }
      }
    }
    std::sort(region.begin(), region.end());
    out.regions.push_back(std::move(region));
  }
  return out;
}

std::vector<double> aupro_thresholds(std::vector<double> pooled, const AuproOptions& options) {
  std::sort(pooled.begin(), pooled.end(), std::greater<>());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
  const std::size_t distinct = pooled.size();
  if (options.exact || distinct <= options.max_thresholds || options.max_thresholds < 2) return pooled;
  const std::size_t q = options.max_thresholds;
  std::vector<double> picked(q);
  for (std::size_t i = 0; i < q; ++i) {
    const auto idx = static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(distinct - 1) / static_cast<double>(q - 1)));
    picked[i] = pooled[idx];
  }
  return picked;
}

double aupro(const std::vector<ScoredMap>& maps, const AuproOptions& options) {
  if (!(options.fpr_limit > 0.0) || options.fpr_limit > 1.0) throw ArgumentError("aupro: fpr_limit must lie in (0, 1]");
  // Pixels sorted by descending score, tagged with their region (or -1 for normal).
  struct Pixel {
    double score;
    std::ptrdiff_t region;
  };
  std::vector<Pixel> pixels;
  std::vector<std::size_t> region_sizes;
  std::size_t n_normal = 0;
  for (const auto& m : maps) {
    if (m.scores.size() != m.height * m.width || m.mask.size() != m.scores.size()) {
      throw DimensionError("aupro: score map and mask shapes differ");
    }
    const RegionSet regions = label_regions(m.mask, m.height, m.width, options.connectivity);
    std::vector<std::ptrdiff_t> owner(m.scores.size(), -1);
    for (const auto& region : regions.regions) {
      const auto id = static_cast<std::ptrdiff_t>(region_sizes.size());
      region_sizes.push_back(region.size());
      for (std::size_t p : region) owner[p] = id;
    }
    for (std::size_t p = 0; p < m.scores.size(); ++p) {
      if (std::isnan(m.scores[p])) throw ArgumentError("aupro: NaN score");
      pixels.push_back({m.scores[p], owner[p]});
      if (owner[p] < 0) ++n_normal;
    }
  }
  if (region_sizes.empty()) throw MetricUndefinedError("aupro: no anomalous pixels");
  if (n_normal == 0) throw MetricUndefinedError("aupro: no normal pixels to define a false-positive rate");

  std::vector<double> pooled(pixels.size());
  std::transform(pixels.begin(), pixels.end(), pooled.begin(), [](const Pixel& p) { return p.score; });
  const std::vector<double> thresholds = aupro_thresholds(std::move(pooled), options);
  std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

  std::vector<std::size_t> hits(region_sizes.size(), 0);
  std::size_t false_pos = 0;
  std::size_t cursor = 0;
  const double n_regions = static_cast<double>(region_sizes.size());
  const double limit = options.fpr_limit;
  double area = 0.0;
  double prev_fpr = 0.0;
  double prev_pro = 0.0;
  for (double th : thresholds) {
    while (cursor < pixels.size() && pixels[cursor].score >= th) {
      if (pixels[cursor].region >= 0) {
        ++hits[static_cast<std::size_t>(pixels[cursor].region)];
      } else {
        ++false_pos;
      }
      ++cursor;
    }
    double overlap = 0.0;
    for (std::size_t r = 0; r < region_sizes.size(); ++r) {
      overlap += static_cast<double>(hits[r]) / static_cast<double>(region_sizes[r]);
    }
    const double pro = overlap / n_regions;
    const double fpr = static_cast<double>(false_pos) / static_cast<double>(n_normal);
    if (fpr >= limit) {
      const double at_limit = fpr > prev_fpr ? prev_pro + (pro - prev_pro) * (limit - prev_fpr) / (fpr - prev_fpr) : pro;
      area += (limit - prev_fpr) * (prev_pro + at_limit) / 2.0;
      return area / limit;
    }
    area += (fpr - prev_fpr) * (prev_pro + pro) / 2.0;
    prev_fpr = fpr;
    prev_pro = pro;
  }
  // Only reachable when the sweep stops short of the limit (capped thresholds
  // always include the minimum score, so FPR reaches 1).
  return area / limit;
}

// Reports -------------------------------------------------------------------

std::array<std::optional<double>, 7> MetricSummary::seven() const {
  return {image_auroc, image_ap, image_f1max, pixel_auroc, pixel_ap, pixel_f1max, pixel_aupro};
}

void MetricSummary::finalize() { mad = dpdiff::mad(seven()); }

double mad(const std::array<std::optional<double>, 7>& seven) {
  double total = 0.0;
  for (std::size_t i = 0; i < seven.size(); ++i) {
    if (!seven[i].has_value() || std::isnan(*seven[i])) {
      throw ContractError("mad: metric " + std::to_string(i) + " of 7 is missing");
    }
    total += *seven[i];
  }
  return total / 7.0;
}

void MetricsReport::aggregate_categories() {
  if (per_category.empty()) throw MetricUndefinedError("no categories to aggregate");
  auto mean_of = [&](std::optional<double> MetricSummary::*field) -> std::optional<double> {
    double total = 0.0;
    for (const auto& [name, summary] : per_category) {
      if (!(summary.*field).has_value()) return std::nullopt;
      total += *(summary.*field);
    }
    return total / static_cast<double>(per_category.size());
  };
  aggregate.image_auroc = mean_of(&MetricSummary::image_auroc);
  aggregate.image_ap = mean_of(&MetricSummary::image_ap);
  aggregate.image_f1max = mean_of(&MetricSummary::image_f1max);
  aggregate.pixel_auroc = mean_of(&MetricSummary::pixel_auroc);
  aggregate.pixel_ap = mean_of(&MetricSummary::pixel_ap);
  aggregate.pixel_f1max = mean_of(&MetricSummary::pixel_f1max);
  aggregate.pixel_aupro = mean_of(&MetricSummary::pixel_aupro);
  aggregate.finalize();
}

namespace {

using ojson = nlohmann::ordered_json;

ojson summary_json(const MetricSummary& s) {
  ojson j;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    j[key] = v.has_value() ? ojson(*v) : ojson(nullptr);
  };
  put("image_auroc", s.image_auroc);
  put("image_ap", s.image_ap);
  put("image_f1max", s.image_f1max);
  put("pixel_auroc", s.pixel_auroc);
  put("pixel_ap", s.pixel_ap);
  put("pixel_f1max", s.pixel_f1max);
  put("pixel_aupro", s.pixel_aupro);
  put("mad", s.mad);
  return j;
}

MetricSummary summary_from(const ojson& j) {
  MetricSummary s;
  auto get = [&j](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  s.image_auroc = get("image_auroc");
  s.image_ap = get("image_ap");
  s.image_f1max = get("image_f1max");
  s.pixel_auroc = get("pixel_auroc");
  s.pixel_ap = get("pixel_ap");
  s.pixel_f1max = get("pixel_f1max");
  s.pixel_aupro = get("pixel_aupro");
  s.mad = get("mad");
  return s;
}

}  // namespace

std::string MetricsReport::to_json() const {
  ojson j = summary_json(aggregate);
  ojson cats = ojson::object();
  for (const auto& [name, summary] : per_category) cats[name] = summary_json(summary);
  j["per_category"] = cats;
  return j.dump(2) + "\n";
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
  MetricsReport report;
  report.aggregate = summary_from(j);
  if (j.contains("per_category")) {
    for (const auto& [name, value] : j.at("per_category").items()) report.per_category[name] = summary_from(value);
  }
  return report;
}

MetricSummary evaluate_category(const CategoryScores& scores, const AuproOptions& options) {
  MetricSummary s;
  s.image_auroc = auroc(scores.image_scores, scores.image_labels);
  s.image_ap = average_precision(scores.image_scores, scores.image_labels);
  s.image_f1max = f1_max(scores.image_scores, scores.image_labels);
  std::vector<double> pixel_scores;
  std::vector<std::uint8_t> pixel_labels;
  for (const auto& m : scores.maps) {
    pixel_scores.insert(pixel_scores.end(), m.scores.begin(), m.scores.end());
    for (auto v : m.mask) pixel_labels.push_back(v ? 1 : 0);
  }
  s.pixel_auroc = auroc(pixel_scores, pixel_labels);
  s.pixel_ap = average_precision(pixel_scores, pixel_labels);
  s.pixel_f1max = f1_max(pixel_scores, pixel_labels);
  s.pixel_aupro = aupro(scores.maps, options);
  s.finalize();
  return s;
}

}  // namespace dpdiff
