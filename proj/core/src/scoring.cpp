// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "dpdiff/errors.hpp"

namespace dpdiff {

double Map2D::max() const { return *std::max_element(values.begin(), values.end()); }
double Map2D::min() const { return *std::min_element(values.begin(), values.end()); }

std::vector<double> token_residuals(const Tensor& x0, const Tensor& x0_hat) {
  if (x0.shape() != x0_hat.shape() || x0.rank() != 2) {
    throw DimensionError("token_residuals: shapes " + shape_str(x0.shape()) + " and " + shape_str(x0_hat.shape()) +
                         " differ");
  }
  const std::size_t n = x0.rows();
  const std::size_t c = x0.cols();
  auto a = x0.data();
  auto b = x0_hat.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < c; ++f) {
      const double d = b[i * c + f] - a[i * c + f];
      out[i] += d * d;
    }
  }
  return out;
}

Map2D anomaly_map(std::span<const double> token_scores, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || token_scores.size() != height * width) {
    throw ArgumentError("anomaly_map: " + std::to_string(token_scores.size()) + " scores cannot fill a " +
                        std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  return {height, width, std::vector<double>(token_scores.begin(), token_scores.end())};
}

namespace {

struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<Tap> taps(std::size_t in, std::size_t out) {
  std::vector<Tap> result(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    result[d] = {lo, hi, src - static_cast<double>(lo)};
  }
  return result;
}

}  // namespace

Map2D bilinear_upsample(const Map2D& map, std::size_t out_height, std::size_t out_width) {
  if (map.height == 0 || map.width == 0) throw ArgumentError("bilinear_upsample: empty map");
  if (out_height < map.height || out_width < map.width) {
    throw ArgumentError("bilinear_upsample: target " + std::to_string(out_height) + "x" + std::to_string(out_width) +
                        " is smaller than the source");
  }
  const auto ty = taps(map.height, out_height);
  const auto tx = taps(map.width, out_width);
  Map2D out{out_height, out_width, std::vector<double>(out_height * out_width)};
  for (std::size_t y = 0; y < out_height; ++y) {
    const Tap& a = ty[y];
    for (std::size_t x = 0; x < out_width; ++x) {
      const Tap& b = tx[x];
      const double top = map.at(a.lo, b.lo) + b.frac * (map.at(a.lo, b.hi) - map.at(a.lo, b.lo));
      const double bottom = map.at(a.hi, b.lo) + b.frac * (map.at(a.hi, b.hi) - map.at(a.hi, b.lo));
      out.values[y * out_width + x] = top + a.frac * (bottom - top);
    }
  }
  return out;
}

double image_score(const Map2D& map, std::size_t pool_kernel) {
  if (pool_kernel < 1 || pool_kernel > std::min(map.height, map.width)) {
    throw ConfigError("image_score: pool kernel " + std::to_string(pool_kernel) + " must lie in [1, " +
                      std::to_string(std::min(map.height, map.width)) + "]");
  }
  if (pool_kernel == 1) return map.max();
  const auto k = static_cast<std::ptrdiff_t>(pool_kernel);
  const std::ptrdiff_t before = (k - 1) / 2;
  const auto h = static_cast<std::ptrdiff_t>(map.height);
  const auto w = static_cast<std::ptrdiff_t>(map.width);
  auto clamp_y = [h](std::ptrdiff_t y) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(y, 0, h - 1)); };
  auto clamp_x = [w](std::ptrdiff_t x) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(x, 0, w - 1)); };

  // Separable box filter: horizontal sums, then vertical sums of those.
  std::vector<double> rows(map.values.size());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = 0; d < k; ++d) s += map.at(static_cast<std::size_t>(y), clamp_x(x - before + d));
      rows[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
  const double inv_area = 1.0 / static_cast<double>(k * k);
  double best = -std::numeric_limits<double>::infinity();
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = 0; d < k; ++d) s += rows[clamp_y(y - before + d) * map.width + static_cast<std::size_t>(x)];
      best = std::max(best, s * inv_area);
    }
  }
  return best;
}

AnomalyMap score_reconstruction(const Tensor& x0, const Tensor& x0_hat, std::size_t grid_h, std::size_t grid_w,
                                std::size_t image_h, std::size_t image_w, std::size_t pool_kernel) {
  AnomalyMap out;
  out.token_scores = token_residuals(x0, x0_hat);
  out.grid_h = grid_h;
  out.grid_w = grid_w;
  out.upsampled = bilinear_upsample(anomaly_map(out.token_scores, grid_h, grid_w), image_h, image_w);
  out.image_score = image_score(out.upsampled, pool_kernel);
  return out;
}

void write_map_csv(const std::filesystem::path& path, const Map2D& map) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  char buf[32];
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), map.at(r, c));
      if (c) out << ',';
      out.write(buf, end - buf);
    }
    out << '\n';
  }
}

Map2D read_map_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  Map2D map;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t cols = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p < end) {
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) throw FormatError("bad number in '" + path.string() + "'");
      map.values.push_back(v);
      ++cols;
      p = next;
      if (p < end && *p == ',') ++p;
    }
    if (map.height == 0) map.width = cols;
    if (cols != map.width) throw FormatError("ragged rows in '" + path.string() + "'");
    ++map.height;
  }
  if (map.height == 0) throw FormatError("empty map file '" + path.string() + "'");
  return map;
}

void write_map_pgm(const std::filesystem::path& path, const Map2D& map) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  const double lo = map.min();
  const double range = map.max() - lo;
  out << "P2\n" << map.width << ' ' << map.height << "\n255\n";
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      const double unit = range > 0.0 ? (map.at(r, c) - lo) / range : 0.0;
      out << (c ? " " : "") << static_cast<int>(std::lround(unit * 255.0));
    }
    out << '\n';
  }
}

}  // namespace dpdiff
