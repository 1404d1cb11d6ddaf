#pragma once
// Brute-force metric recomputation from coordinate sets.

#include <cmath>
#include <set>
#include <utility>

#include "regnet/metrics.hpp"
#include "regnet/random.hpp"

namespace regnet::testing {

inline std::set<std::pair<Index, Index>> foreground(const Mask& m) {
  std::set<std::pair<Index, Index>> s;
  for (Index y = 0; y < m.height; ++y) {
    for (Index x = 0; x < m.width; ++x) {
      if (m.at(x, y)) s.insert({x, y});
    }
  }
  return s;
}

/// 2|A ∩ B| / (|A| + |B|) over explicit pixel sets.
inline double brute_force_dice(const Mask& a, const Mask& b) {
  const auto sa = foreground(a), sb = foreground(b);
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& p : sa) common += sb.count(p);
  return 2.0 * static_cast<double>(common) / static_cast<double>(sa.size() + sb.size());
}

inline double brute_force_tre(Point2 a, Point2 b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

/// Random mask with a random fill density, including fully empty masks.
inline Mask random_mask(Index w, Index h, Rng& rng) {
  Mask m(w, h);
  const double density = rng.uniform(-0.1, 1.0);
  for (auto& v : m.values) v = rng.uniform(0, 1) < density ? 1 : 0;
  return m;
}

struct MetricOracleResult {
  int dice_mismatches = 0;
  int tre_mismatches = 0;
  double worst_tre_error = 0.0;
};

/// Compares dice() exactly and tre()/mean TRE within 1e-9 on `trials` random cases.
inline MetricOracleResult run_metric_oracles(std::uint64_t seed, int trials) {
  MetricOracleResult r;
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const Index w = 1 + static_cast<Index>(rng.next() % 12), h = 1 + static_cast<Index>(rng.next() % 12);
    const Mask a = random_mask(w, h, rng), b = random_mask(w, h, rng);
    if (dice(a, b) != brute_force_dice(a, b)) ++r.dice_mismatches;

    std::vector<LandmarkPair> pairs;
    const int n = 1 + static_cast<int>(rng.next() % 8);
    const auto m = from_geometry({rng.uniform(-20, 20), rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2),
                                  rng.uniform(-0.1, 0.1), rng.uniform(-5, 5), rng.uniform(-5, 5)},
                                 {32, 32});
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const Point2 mv{rng.uniform(0, 64), rng.uniform(0, 64)}, fx{rng.uniform(0, 64), rng.uniform(0, 64)};
      pairs.push_back({"p" + std::to_string(i), mv, fx});
      const Point2 moved{m.a * mv.x + m.b * mv.y + m.sx, m.c * mv.x + m.d * mv.y + m.sy};
      const double expected = brute_force_tre(moved, fx);
      const double err = std::abs(tre(m.apply(mv), fx) - expected);
      r.worst_tre_error = std::max(r.worst_tre_error, err);
      if (err > 1e-9) ++r.tre_mismatches;
      total += expected;
    }
    const double mean_err = std::abs(evaluate_registration(m, pairs).summary.mean - total / n);
    r.worst_tre_error = std::max(r.worst_tre_error, mean_err);
    if (mean_err > 1e-9) ++r.tre_mismatches;
  }
  return r;
}

}  // namespace regnet::testing
