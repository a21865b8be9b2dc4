// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "acceptance.hpp"
#include "dpdiff/diffusion.hpp"
#include "dpdiff/metrics.hpp"
#include "dpdiff/prototype.hpp"

namespace dpdiff::acceptance {
namespace {

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

double max_marginal_violation(const Tensor& plan, const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < b.size(); ++j) s += plan.at(i, j);
    worst = std::max(worst, std::abs(s - a[i]));
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += plan.at(i, j);
    worst = std::max(worst, std::abs(s - b[j]));
  }
  return worst;
}

}  // namespace

Outcome check_sinkhorn(const Context&) {
  Stopwatch clock;
  constexpr int kTrials = 50;
  Rng rng(31);

  // Marginals on general problems: random sizes and non-uniform weights.
  double worst_violation = 0.0;
  int unconverged = 0;
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 12));
    const auto k = static_cast<std::size_t>(rng.uniform_int(2, 6));
    std::vector<double> cost(n * k), a(n), b(k);
    for (double& c : cost) c = rng.uniform(0.0, 4.0);
    for (double& w : a) w = rng.uniform(0.5, 2.0);
    for (double& w : b) w = rng.uniform(0.5, 2.0);
    const double sa = std::accumulate(a.begin(), a.end(), 0.0);
    const double sb = std::accumulate(b.begin(), b.end(), 0.0);
    for (double& w : a) w /= sa;
    for (double& w : b) w /= sb;
    const Tensor c = Tensor::from({n, k}, cost);
    const auto plan = sinkhorn_plan(c, a, b, default_sinkhorn_epsilon(cost), 5000, 1e-9);
    if (!plan.converged) {
      ++unconverged;
      continue;
    }
    worst_violation = std::max(worst_violation, max_marginal_violation(plan.plan, a, b));
  }

  // N = K = 3, uniform weights, eps = 1e-3 against the best permutation.
  double worst_gap = 0.0;
  int small_unconverged = 0;
  for (int trial = 0; trial < kTrials; ++trial) {
    std::vector<double> cost(9);
    for (double& c : cost) c = rng.uniform(0.0, 1.0);
    const std::vector<double> u(3, 1.0 / 3.0);
    const auto plan = sinkhorn_plan(Tensor::from({3, 3}, cost), u, u, 1e-3, 100000, 1e-6);
    if (!plan.converged) ++small_unconverged;
    worst_violation = std::max(worst_violation, max_marginal_violation(plan.plan, u, u));
    double linear = 0.0;
    for (std::size_t i = 0; i < 9; ++i) linear += plan.plan[i] * cost[i];
    std::array<int, 3> perm{0, 1, 2};
    double best = std::numeric_limits<double>::infinity();
    do {
      best = std::min(best, (cost[perm[0]] + cost[3 + perm[1]] + cost[6 + perm[2]]) / 3.0);
    } while (std::next_permutation(perm.begin(), perm.end()));
    worst_gap = std::max(worst_gap, std::abs(linear - best) / best);
  }

  const double secs = clock.seconds();
  Outcome out;
  out.pass = unconverged == 0 && small_unconverged == 0 && worst_violation <= 1e-6 && worst_gap <= 0.02 && secs < 10.0;
  out.detail = format(
      "max marginal violation %.2e (tol 1e-6), max gap to permutation optimum %.3f%% (tol 2%%), "
      "unconverged %d+%d, %.2fs (limit 10s)",
      worst_violation, 100.0 * worst_gap, unconverged, small_unconverged, secs);
  return out;
}

namespace {

// Predicts the exact noise for a known clean input.
class OracleDenoiser : public NoisePredictor {
 public:
  OracleDenoiser(const NoiseSchedule& schedule, Tensor x0) : schedule_(schedule), x0_(std::move(x0)) {}
  Tensor predict(const Tensor& x_t, const Tensor&, int t) const override {
    const double ab = schedule_.alpha_bar(t);
    std::vector<double> eps(x_t.numel());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      eps[i] = (x_t[i] - std::sqrt(ab) * x0_[i]) / std::sqrt(1.0 - ab);
    }
    return Tensor::from(x_t.shape(), std::move(eps));
  }

 private:
  const NoiseSchedule& schedule_;
  Tensor x0_;
};

}  // namespace

Outcome check_diffusion_identities(const Context&) {
  Stopwatch clock;
  const NoiseSchedule s = build_schedule();
  Rng rng(41);

  // Step-by-step chain against the closed form: 1e4 samples of a 64-value tensor.
  constexpr std::size_t kSamples = 10000;
  constexpr std::size_t kWidth = 64;
  const std::vector<int> probes{1, 10, 100, 250, 500, 1000};
  std::vector<double> chain(kSamples * kWidth, 1.0);
  double worst_stat = 0.0;
  std::size_t probe = 0;
  for (int t = 1; t <= s.steps && probe < probes.size(); ++t) {
    const double a = std::sqrt(s.alpha(t));
    const double b = std::sqrt(s.beta(t));
    for (double& x : chain) x = a * x + b * rng.normal();
    if (t != probes[probe]) continue;
    ++probe;
    const double mu = std::sqrt(s.alpha_bar(t));
    const double var = 1.0 - s.alpha_bar(t);
    // Closed-form samples through the library for the same level.
    const Tensor x0 = Tensor::full({kSamples, kWidth}, 1.0);
    const DiffusionState st = forward_perturb(s, x0, Tensor::zeros({1, kWidth}), t, rng);
    const std::span<const double> chain_values(chain);
    for (std::span<const double> v : {chain_values, st.x_t.data()}) {
      double m = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double q = 0.0;
      for (double x : v) q += (x - m) * (x - m);
      q /= static_cast<double>(v.size() - 1);
      const double mean_err = std::abs(m - mu) / std::sqrt(mu * mu + var);
      const double var_err = std::abs(q - var) / var;
      worst_stat = std::max({worst_stat, mean_err, var_err});
    }
  }

  // Oracle denoiser: full DDPM chain, strided DDPM, DDIM-3 and one-step DDIM.
  double worst_recovery = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = standard_normal({6, 8}, rng);
    const OracleDenoiser oracle(s, x0);
    const PrototypeCondition cond{standard_normal({3, 8}, rng), standard_normal({3, 8}, rng)};
    const int t = static_cast<int>(rng.uniform_int(1, 1000));
    const DiffusionState st = forward_perturb(s, x0, cond.p0, t, rng);
    const auto full = make_step_list(t, t);
    const auto one = make_step_list(t, 1);
    const auto three = make_step_list(t, std::min(3, t));
    const auto fifty = make_step_list(t, std::min(50, t));
    for (const Tensor& r : {ddpm_reconstruct(oracle, s, st.x_t, cond, full, rng),
                            ddpm_reconstruct(oracle, s, st.x_t, cond, fifty, rng),
                            ddim_reconstruct(oracle, s, st.x_t, cond, one),
                            ddim_reconstruct(oracle, s, st.x_t, cond, three)}) {
      for (std::size_t i = 0; i < x0.numel(); ++i) worst_recovery = std::max(worst_recovery, std::abs(r[i] - x0[i]));
    }
  }

  // Final step: no noise, bit-identical across generators and to the mean formula.
  bool final_exact = true;
  double worst_mean_gap = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x1 = standard_normal({5, 4}, rng);
    const Tensor x0 = standard_normal({5, 4}, rng);
    const OracleDenoiser model(s, x0);
    const Tensor p = Tensor::zeros({1, 4});
    Rng r1(trial), r2(trial + 1000);
    const Tensor a = ddpm_reverse_step(model, s, x1, p, 1, r1);
    const Tensor b = ddpm_reverse_step(model, s, x1, p, 1, r2);
    const Tensor eps = model.predict(x1, p, 1);
    for (std::size_t i = 0; i < a.numel(); ++i) {
      const double mean = (1.0 / std::sqrt(s.alpha(1))) * (x1[i] - s.beta(1) / std::sqrt(1.0 - s.alpha_bar(1)) * eps[i]);
      if (a[i] != b[i]) final_exact = false;
      worst_mean_gap = std::max(worst_mean_gap, std::abs(a[i] - mean));
    }
    // No draw may be consumed by the last step.
    Rng fresh1(trial), fresh2(trial + 1000);
    if (r1.next_u64() != fresh1.next_u64() || r2.next_u64() != fresh2.next_u64()) final_exact = false;
  }

  const double secs = clock.seconds();
  Outcome out;
  out.pass = worst_stat <= 0.01 && worst_recovery <= 1e-8 && final_exact && worst_mean_gap <= 1e-12 && secs < 60.0;
  out.detail = format(
      "chain vs closed form worst stat err %.3f%% (tol 1%%), oracle recovery max err %.2e (tol 1e-8), "
      "final step bit-identical across generators with no draws %s (max gap to posterior mean %.1e), %.1fs "
      "(limit 60s)",
      100.0 * worst_stat, worst_recovery, final_exact ? "yes" : "no", worst_mean_gap, secs);
  return out;
}

namespace {

using Labels = std::vector<std::uint8_t>;

// Exhaustive threshold enumeration: one threshold per distinct score plus
// +infinity, positive at score >= threshold, integer counts throughout.
struct Sweep {
  std::vector<std::size_t> tp, fp;
  std::size_t pos = 0, neg = 0;
};

Sweep enumerate_thresholds(const std::vector<double>& scores, const Labels& labels) {
  std::set<double, std::greater<>> distinct(scores.begin(), scores.end());
  Sweep sw;
  for (auto l : labels) (l ? sw.pos : sw.neg)++;
  sw.tp.push_back(0);
  sw.fp.push_back(0);
  for (double th : distinct) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= th) (labels[i] ? tp : fp)++;
    }
    sw.tp.push_back(tp);
    sw.fp.push_back(fp);
  }
  return sw;
}

double brute_auroc(const Sweep& sw) {
  double area2 = 0.0;  // twice the trapezoid area in count units
  for (std::size_t i = 1; i < sw.tp.size(); ++i) {
    area2 += static_cast<double>((sw.fp[i] - sw.fp[i - 1]) * (sw.tp[i] + sw.tp[i - 1]));
  }
  return area2 / (2.0 * static_cast<double>(sw.pos * sw.neg));
}

double brute_ap(const Sweep& sw) {
  double ap = 0.0;
  for (std::size_t i = 1; i < sw.tp.size(); ++i) {
    const double dr = static_cast<double>(sw.tp[i] - sw.tp[i - 1]) / static_cast<double>(sw.pos);
    if (dr > 0.0) ap += dr * static_cast<double>(sw.tp[i]) / static_cast<double>(sw.tp[i] + sw.fp[i]);
  }
  return ap;
}

double brute_f1(const Sweep& sw) {
  double best = 0.0;
  for (std::size_t i = 1; i < sw.tp.size(); ++i) {
    if (sw.tp[i] == 0) continue;
    best = std::max(best, 2.0 * static_cast<double>(sw.tp[i]) /
                              static_cast<double>(2 * sw.tp[i] + sw.fp[i] + (sw.pos - sw.tp[i])));
  }
  return best;
}

// Flood fill with 8-connectivity.
std::vector<int> brute_regions(const ScoredMap& m, int& count) {
  std::vector<int> owner(m.mask.size(), -1);
  count = 0;
  for (std::size_t start = 0; start < m.mask.size(); ++start) {
    if (!m.mask[start] || owner[start] >= 0) continue;
    std::vector<std::size_t> stack{start};
    owner[start] = count;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const auto r = static_cast<long>(p / m.width), c = static_cast<long>(p % m.width);
      for (long dr = -1; dr <= 1; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          const long rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(m.height) || cc >= static_cast<long>(m.width)) continue;
          const auto q = static_cast<std::size_t>(rr) * m.width + static_cast<std::size_t>(cc);
          if (m.mask[q] && owner[q] < 0) {
            owner[q] = count;
            stack.push_back(q);
          }
        }
      }
    }
    ++count;
  }
  return owner;
}

double brute_aupro(const std::vector<ScoredMap>& maps, double limit) {
  struct Px {
    double score;
    int region;
  };
  std::vector<Px> px;
  std::vector<std::size_t> sizes;
  std::size_t normal = 0;
  for (const auto& m : maps) {
    int count = 0;
    const auto owner = brute_regions(m, count);
    const int base = static_cast<int>(sizes.size());
    sizes.resize(sizes.size() + static_cast<std::size_t>(count), 0);
    for (std::size_t p = 0; p < m.scores.size(); ++p) {
      const int reg = owner[p] < 0 ? -1 : base + owner[p];
      px.push_back({m.scores[p], reg});
      if (reg < 0) {
        ++normal;
      } else {
        ++sizes[static_cast<std::size_t>(reg)];
      }
    }
  }
  std::set<double, std::greater<>> distinct;
  for (const auto& p : px) distinct.insert(p.score);
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  for (double th : distinct) {
    std::vector<std::size_t> hit(sizes.size(), 0);
    std::size_t fp = 0;
    for (const auto& p : px) {
      if (p.score < th) continue;
      if (p.region < 0) {
        ++fp;
      } else {
        ++hit[static_cast<std::size_t>(p.region)];
      }
    }
    double pro = 0.0;
    for (std::size_t r = 0; r < sizes.size(); ++r) pro += static_cast<double>(hit[r]) / static_cast<double>(sizes[r]);
    curve.emplace_back(static_cast<double>(fp) / static_cast<double>(normal), pro / static_cast<double>(sizes.size()));
  }
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const auto [x0, y0] = curve[i - 1];
    auto [x1, y1] = curve[i];
    if (x1 >= limit) {
      const double y = x1 > x0 ? y0 + (y1 - y0) * (limit - x0) / (x1 - x0) : y1;
      area += (limit - x0) * (y0 + y) / 2.0;
      return area / limit;
    }
    area += (x1 - x0) * (y0 + y1) / 2.0;
  }
  return area / limit;
}

std::vector<double> random_scores(std::size_t n, Rng& rng) {
  // Coarse values so ties are common.
  std::vector<double> s(n);
  for (double& v : s) v = static_cast<double>(rng.uniform_int(0, 6)) / 4.0;
  return s;
}

double increasing_transform(double x) { return std::exp(1.5 * x) + x * x * x; }

}  // namespace

Outcome check_metrics_oracle(const Context&) {
  Stopwatch clock;
  Rng rng(51);
  constexpr int kInstances = 1000;
  constexpr double kExact = 1e-12;
  double worst = 0.0;
  double worst_invariance = 0.0;
  int instances = 0;
  while (instances < kInstances) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 12));
    Labels labels(n);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
    const auto positives = std::count(labels.begin(), labels.end(), 1);
    if (positives == 0 || positives == static_cast<long>(n)) continue;
    const auto scores = random_scores(n, rng);
    const Sweep sw = enumerate_thresholds(scores, labels);
    const double lib[3] = {auroc(scores, labels), average_precision(scores, labels), f1_max(scores, labels)};
    const double ref[3] = {brute_auroc(sw), brute_ap(sw), brute_f1(sw)};
    std::vector<double> moved(scores);
    for (double& v : moved) v = increasing_transform(v);
    const double inv[3] = {auroc(moved, labels), average_precision(moved, labels), f1_max(moved, labels)};
    for (int i = 0; i < 3; ++i) {
      worst = std::max(worst, std::abs(lib[i] - ref[i]));
      worst_invariance = std::max(worst_invariance, std::abs(lib[i] - inv[i]));
    }

    // AUPRO: one to three maps up to 6x6, at most three regions in total.
    std::vector<ScoredMap> maps;
    const auto count = static_cast<std::size_t>(rng.uniform_int(1, 3));
    std::size_t regions_left = 3;
    bool any_region = false;
    bool any_normal = false;
    for (std::size_t m = 0; m < count; ++m) {
      ScoredMap map;
      map.height = static_cast<std::size_t>(rng.uniform_int(1, 6));
      map.width = static_cast<std::size_t>(rng.uniform_int(1, 6));
      map.scores = random_scores(map.height * map.width, rng);
      map.mask.assign(map.scores.size(), 0);
      const auto rects = std::min<std::size_t>(regions_left, static_cast<std::size_t>(rng.uniform_int(0, 1)));
      for (std::size_t r = 0; r < rects; ++r) {
        const auto r0 = rng.uniform_int(0, map.height - 1), c0 = rng.uniform_int(0, map.width - 1);
        const auto r1 = rng.uniform_int(r0, map.height - 1), c1 = rng.uniform_int(c0, map.width - 1);
        for (auto y = r0; y <= r1; ++y) {
          for (auto x = c0; x <= c1; ++x) map.mask[y * map.width + x] = 1;
        }
        --regions_left;
        any_region = true;
      }
      if (std::count(map.mask.begin(), map.mask.end(), 0) > 0) any_normal = true;
      maps.push_back(std::move(map));
    }
    if (any_region && any_normal) {
      for (double limit : {0.3, 1.0}) {
        AuproOptions opt;
        opt.fpr_limit = limit;
        const double a = aupro(maps, opt);
        worst = std::max(worst, std::abs(a - brute_aupro(maps, limit)));
        auto moved_maps = maps;
        for (auto& m : moved_maps) {
          for (double& v : m.scores) v = increasing_transform(v);
        }
        worst_invariance = std::max(worst_invariance, std::abs(a - aupro(moved_maps, opt)));
      }
    }
    ++instances;
  }
  const double secs = clock.seconds();
  Outcome out;
  out.pass = worst <= kExact && worst_invariance <= 1e-12 && secs < 60.0;
  out.detail = format(
      "%d instances: max |metric - brute force| %.1e, max monotone-transform change %.1e (tol 1e-12), %.2fs "
      "(limit 60s)",
      instances, worst, worst_invariance, secs);
  return out;
}

Outcome check_mad_spot(const Context&) {
  // Reference row of seven metric values (percent) and its printed mean.
  const std::array<std::optional<double>, 7> seven{92.4, 98.5, 95.8, 94.8, 50.1, 50.7, 80.1};
  constexpr double kPrinted = 80.4;
  const double value = mad(seven);
  const double gap = std::abs(value - kPrinted);
  Outcome out;
  out.pass = gap <= 0.05;
  out.detail = format("mean of seven = %.6f, printed %.1f, |diff| %.4f (tol 0.05)", value, kPrinted, gap);
  return out;
}

}  // namespace dpdiff::acceptance
