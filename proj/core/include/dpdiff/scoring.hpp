// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "dpdiff/tensor.hpp"

namespace dpdiff {

/// Row-major 2-D grid of doubles.
struct Map2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  double max() const;
  double min() const;
};

/// s_i = |x0_hat_i - x0_i|^2 per token.
std::vector<double> token_residuals(const Tensor& x0, const Tensor& x0_hat);

/// Row-major reshape of N = h * w token scores.
Map2D anomaly_map(std::span<const double> token_scores, std::size_t height, std::size_t width);

/// Bilinear resize with half-pixel centers: src = (dst + 0.5) * in/out - 0.5, clamped.
Map2D bilinear_upsample(const Map2D& map, std::size_t out_height, std::size_t out_width);

/// Max of a stride-1 square mean filter with edge-replicating padding.
double image_score(const Map2D& map, std::size_t pool_kernel);

struct AnomalyMap {
  std::vector<double> token_scores;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Map2D upsampled;
  double image_score = 0.0;
};

AnomalyMap score_reconstruction(const Tensor& x0, const Tensor& x0_hat, std::size_t grid_h, std::size_t grid_w,
                                std::size_t image_h, std::size_t image_w, std::size_t pool_kernel);

/// One line per row, comma-separated, round-trip precision.
void write_map_csv(const std::filesystem::path& path, const Map2D& map);
Map2D read_map_csv(const std::filesystem::path& path);
/// ASCII PGM (P2), linearly scaled to [0, 255] over the map's own range.
void write_map_pgm(const std::filesystem::path& path, const Map2D& map);

}  // namespace dpdiff
