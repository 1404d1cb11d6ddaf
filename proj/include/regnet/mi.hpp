#pragma once
// Intensity-based affine registration by mutual-information maximisation:
// hard-binned joint histograms, a Gaussian pyramid and multi-start
// Nelder-Mead over a bounded geometric parameterisation.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <thread>
#include <vector>

#include "regnet/affine.hpp"
#include "regnet/image.hpp"
#include "regnet/random.hpp"

namespace regnet {

struct JointHistogram {
  int bins = 0;
  std::vector<double> counts;  // bins x bins, row = fixed bin, column = moving bin
  std::vector<double> fixed_totals;
  std::vector<double> moving_totals;
  double total = 0.0;

  explicit JointHistogram(int b = 32)
      : bins(b),
        counts(static_cast<std::size_t>(b * b), 0.0),
        fixed_totals(static_cast<std::size_t>(b), 0.0),
        moving_totals(static_cast<std::size_t>(b), 0.0) {}

  void add(int f, int m) {
    counts[static_cast<std::size_t>(f * bins + m)] += 1.0;
    fixed_totals[static_cast<std::size_t>(f)] += 1.0;
    moving_totals[static_cast<std::size_t>(m)] += 1.0;
    total += 1.0;
  }
};

/// Bin index of an intensity in [0, 1]; out-of-range values clamp to the end bins.
inline int intensity_bin(double v, int bins) {
  return std::clamp(static_cast<int>(v * bins), 0, bins - 1);
}

/// Natural-log mutual information of a joint histogram.
inline double mutual_information(const JointHistogram& h) {
  if (h.total <= 0.0) throw std::invalid_argument("mutual_information: empty overlap");
  double mi = 0.0;
  for (int i = 0; i < h.bins; ++i) {
    const double pi = h.fixed_totals[static_cast<std::size_t>(i)];
    if (pi == 0.0) continue;
    for (int j = 0; j < h.bins; ++j) {
      const double pij = h.counts[static_cast<std::size_t>(i * h.bins + j)];
      if (pij == 0.0) continue;
      const double pj = h.moving_totals[static_cast<std::size_t>(j)];
      mi += pij * std::log(pij * h.total / (pi * pj));
    }
  }
  return std::max(0.0, mi / h.total);
}

/// Shannon entropy (nats) of a histogram's fixed marginal.
inline double fixed_entropy(const JointHistogram& h) {
  double e = 0.0;
  for (double c : h.fixed_totals) {
    if (c > 0) e -= (c / h.total) * std::log(c / h.total);
  }
  return e;
}

/// Histogram of two pixel-aligned images after per-image min-max normalisation.
inline JointHistogram joint_histogram(const Image& fixed, const Image& moving, int bins) {
  if (!same_dimensions(fixed, moving)) throw DimensionError("joint_histogram: image sizes differ");
  if (bins < 2) throw std::invalid_argument("joint_histogram: bins must be >= 2");
  const auto f = normalize_intensity(fixed), m = normalize_intensity(moving);
  JointHistogram h(bins);
  for (std::size_t i = 0; i < f.pixels.size(); ++i) h.add(intensity_bin(f.pixels[i], bins), intensity_bin(m.pixels[i], bins));
  return h;
}

inline double mutual_information(const Image& fixed, const Image& moving, int bins = 32) {
  if (fixed.pixels.empty()) throw std::invalid_argument("mutual_information: empty overlap");
  return mutual_information(joint_histogram(fixed, moving, bins));
}

// ---------------------------------------------------------------------------
// Search

struct SearchBounds {
  double max_rotation_deg = 30.0;
  double min_scale = 0.7;
  double max_scale = 1.3;
  double max_shear = 0.2;
  double max_translation_fraction = 0.25;  // of width (x) and height (y)
};

struct SearchConfig {
  int pyramid_levels = 3;
  int bins = 32;
  int max_iters = 400;  // per level
  int restarts = 4;
  SearchBounds bounds;
  std::uint64_t seed = 0;
  double min_overlap = 0.25;
  double initial_step = 0.15;  // coarsest simplex edge, in units of the half-range of each bound
  double tolerance = 1e-7;
  // Blur every level once before binning so that resampling does not change
  // the noise statistics of the moving image between grid-aligned and
  // off-grid transforms.
  bool presmooth = true;
  int jobs = 1;  // restarts evaluated concurrently
};

struct MiResult {
  AffineMatrix matrix;            // moving -> fixed point map, pixel convention
  AffineGeometry sampling_geometry;  // fixed pixel -> moving pixel
  double mi_score = 0.0;
  double identity_score = 0.0;
  int restarts_used = 0;
  bool converged = false;
  bool warning = false;
  std::string warning_message;
  int winning_restart = 0;
  std::vector<double> level_start_scores;  // winner, per level from coarse to fine
  std::vector<double> level_final_scores;
};

namespace detail {

/// Separable [1 2 1] / 4 blur with edge replication.
inline Image binomial_blur(const Image& img) {
  const Index w = img.width, h = img.height;
  Image tmp(w, h), blur(w, h);
  auto clampx = [&](Index x) { return std::clamp<Index>(x, 0, w - 1); };
  auto clampy = [&](Index y) { return std::clamp<Index>(y, 0, h - 1); };
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      tmp.at(x, y) = 0.25f * img.at(clampx(x - 1), y) + 0.5f * img.at(x, y) + 0.25f * img.at(clampx(x + 1), y);
    }
  }
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      blur.at(x, y) = 0.25f * tmp.at(x, clampy(y - 1)) + 0.5f * tmp.at(x, y) + 0.25f * tmp.at(x, clampy(y + 1));
    }
  }
  return blur;
}

/// Binomial blur followed by 2x2 averaging; pixel centres stay aligned.
inline Image pyramid_down(const Image& img) {
  const Image blur = binomial_blur(img);
  Image out(img.width / 2, img.height / 2);
  for (Index y = 0; y < out.height; ++y) {
    for (Index x = 0; x < out.width; ++x) {
      out.at(x, y) = 0.25f * (blur.at(2 * x, 2 * y) + blur.at(2 * x + 1, 2 * y) + blur.at(2 * x, 2 * y + 1) +
                              blur.at(2 * x + 1, 2 * y + 1));
    }
  }
  return out;
}

using Vec6 = std::array<double, 6>;

/// Normalised search vector in [-1, 1]^6 -> geometric parameters.
inline AffineGeometry decode(const Vec6& x, const SearchBounds& b, Index width, Index height) {
  const double mid = 0.5 * (b.min_scale + b.max_scale), half = 0.5 * (b.max_scale - b.min_scale);
  AffineGeometry g;
  g.rotation_deg = x[0] * b.max_rotation_deg;
  g.scale_x = mid + x[1] * half;
  g.scale_y = mid + x[2] * half;
  g.shear = x[3] * b.max_shear;
  g.tx = x[4] * b.max_translation_fraction * static_cast<double>(width);
  g.ty = x[5] * b.max_translation_fraction * static_cast<double>(height);
  return g;
}

inline Vec6 clamp_box(Vec6 x) {
  for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
  return x;
}

/// One pyramid level: normalised images plus precomputed fixed bins.
struct Level {
  Image fixed, moving;
  int scale = 1;  // full-resolution pixels per level pixel
  int bins = 32;
  std::vector<int> fixed_bins;
};

/// MI of the fixed level image against the moving image sampled at S * p.
/// Returns -inf when the overlap is below `min_overlap`.
inline double level_score(const Level& L, const AffineMatrix& sampling, double min_overlap) {
  const Index w = L.fixed.width, h = L.fixed.height;
  const Index mw = L.moving.width, mh = L.moving.height;
  JointHistogram hist(L.bins);
  const double xmax = static_cast<double>(mw - 1), ymax = static_cast<double>(mh - 1);
  for (Index y = 0; y < h; ++y) {
    double qx = sampling.b * static_cast<double>(y) + sampling.sx;
    double qy = sampling.d * static_cast<double>(y) + sampling.sy;
    for (Index x = 0; x < w; ++x, qx += sampling.a, qy += sampling.c) {
      if (qx < 0.0 || qy < 0.0 || qx > xmax || qy > ymax) continue;
      const auto x0 = std::min(static_cast<Index>(qx), mw - 2 < 0 ? 0 : mw - 2);
      const auto y0 = std::min(static_cast<Index>(qy), mh - 2 < 0 ? 0 : mh - 2);
      const double fx = qx - static_cast<double>(x0), fy = qy - static_cast<double>(y0);
      const float* row0 = &L.moving.pixels[static_cast<std::size_t>(y0 * mw + x0)];
      const float* row1 = row0 + mw;
      const double v = (1 - fy) * ((1 - fx) * row0[0] + fx * row0[1]) + fy * ((1 - fx) * row1[0] + fx * row1[1]);
      hist.add(L.fixed_bins[static_cast<std::size_t>(y * w + x)], intensity_bin(v, L.bins));
    }
  }
  if (hist.total < min_overlap * static_cast<double>(w * h) || hist.total == 0.0) {
    return -std::numeric_limits<double>::infinity();
  }
  return mutual_information(hist);
}

inline AffineMatrix level_sampling(const AffineGeometry& full, const Level& L) {
  AffineGeometry g = full;
  g.tx /= L.scale;
  g.ty /= L.scale;
  return from_geometry(g, image_centre(L.fixed.width, L.fixed.height));
}

struct NelderMeadResult {
  Vec6 x{};
  double value = 0.0;
  bool converged = false;
  int evaluations = 0;
};

/// Maximises f over the box [-1, 1]^6 starting from `start`. The start point
/// is a simplex vertex, so the result is never worse than f(start).
inline NelderMeadResult nelder_mead_maximize(const std::function<double(const Vec6&)>& f, const Vec6& start,
                                             double step, int max_iters, double tolerance) {
  constexpr int n = 6;
  std::array<Vec6, n + 1> pts;
  std::array<double, n + 1> val;
  NelderMeadResult res;
  auto eval = [&](const Vec6& x) {
    ++res.evaluations;
    return f(x);
  };
  pts[0] = clamp_box(start);
  for (int i = 0; i < n; ++i) {
    Vec6 p = pts[0];
    p[i] += (p[i] + step <= 1.0) ? step : -step;
    pts[i + 1] = clamp_box(p);
  }
  for (int i = 0; i <= n; ++i) val[i] = eval(pts[i]);

  std::array<int, n + 1> order;
  for (int iter = 0; iter < max_iters; ++iter) {
    for (int i = 0; i <= n; ++i) order[i] = i;
    // Descending by value; ties keep the lower index first.
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return val[a] > val[b]; });
    const int best = order[0], worst = order[n], second = order[n - 1];
    double spread = 0.0;
    for (int i = 1; i <= n; ++i) {
      for (int k = 0; k < n; ++k) spread = std::max(spread, std::abs(pts[order[i]][k] - pts[best][k]));
    }
    if (std::isfinite(val[best]) && std::abs(val[best] - val[worst]) < tolerance && spread < 1e-4) {
      res.converged = true;
      break;
    }
    Vec6 centroid{};
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < n; ++k) centroid[k] += pts[order[i]][k] / n;
    }
    auto along = [&](double t) {
      Vec6 p;
      for (int k = 0; k < n; ++k) p[k] = centroid[k] + t * (pts[worst][k] - centroid[k]);
      return clamp_box(p);
    };
    const Vec6 xr = along(-1.0);
    const double fr = eval(xr);
    if (fr > val[best]) {
      const Vec6 xe = along(-2.0);
      const double fe = eval(xe);
      if (fe > fr) {
        pts[worst] = xe, val[worst] = fe;
      } else {
        pts[worst] = xr, val[worst] = fr;
      }
      continue;
    }
    if (fr > val[second]) {
      pts[worst] = xr, val[worst] = fr;
      continue;
    }
    const bool outside = fr > val[worst];
    const Vec6 xc = along(outside ? -0.5 : 0.5);
    const double fc = eval(xc);
    if (fc > std::max(fr, val[worst]) || (outside && fc >= fr)) {
      pts[worst] = xc, val[worst] = fc;
      continue;
    }
    for (int i = 1; i <= n; ++i) {
      const int idx = order[i];
      for (int k = 0; k < n; ++k) pts[idx][k] = pts[best][k] + 0.5 * (pts[idx][k] - pts[best][k]);
      val[idx] = eval(pts[idx]);
    }
  }
  int best = 0;
  for (int i = 1; i <= n; ++i) {
    if (val[i] > val[best]) best = i;
  }
  res.x = pts[best];
  res.value = val[best];
  return res;
}

struct RestartOutcome {
  Vec6 x{};
  double score = -std::numeric_limits<double>::infinity();
  bool converged = false;
  std::vector<double> level_start, level_final;
};

}  // namespace detail

/// Per-level bin count: fewer bins on small images keeps the histogram populated.
inline int level_bins(int bins, Index pixels) {
  const int adaptive = static_cast<int>(std::lround(std::sqrt(static_cast<double>(pixels)) / 4.0));
  return std::clamp(adaptive, std::min(8, bins), bins);
}

/// MI between `fixed` and `moving` resampled through `sampling` (fixed pixel
/// -> moving pixel), with the same normalisation and overlap rules as the search.
inline double mi_at(const Image& fixed, const Image& moving, const AffineMatrix& sampling,
                    const SearchConfig& config = {}) {
  if (!same_dimensions(fixed, moving)) throw DimensionError("mi_at: image sizes differ");
  const int bins = level_bins(config.bins, fixed.width * fixed.height);
  detail::Level L{normalize_intensity(fixed), normalize_intensity(moving), 1, bins, {}};
  if (config.presmooth) {
    L.fixed = detail::binomial_blur(L.fixed);
    L.moving = detail::binomial_blur(L.moving);
  }
  for (float v : L.fixed.pixels) L.fixed_bins.push_back(intensity_bin(v, bins));
  return detail::level_score(L, sampling, config.min_overlap);
}

inline MiResult register_mi(const Image& fixed, const Image& moving, const SearchConfig& config = {}) {
  if (!same_dimensions(fixed, moving)) throw DimensionError("register_mi: image sizes differ");
  if (config.pyramid_levels < 1) throw std::invalid_argument("register_mi: pyramid_levels must be >= 1");
  if (config.bins < 2 || config.restarts < 1 || config.max_iters < 1) {
    throw std::invalid_argument("register_mi: bins >= 2, restarts >= 1 and max_iters >= 1 required");
  }
  const auto& b = config.bounds;
  if (!(b.min_scale < b.max_scale) || b.max_rotation_deg <= 0 || b.max_shear < 0 || b.max_translation_fraction <= 0) {
    throw std::invalid_argument("register_mi: search bounds must form a nonempty box");
  }
  const Index w = fixed.width, h = fixed.height;
  const int divisor = 1 << (config.pyramid_levels - 1);
  if (w % divisor != 0 || h % divisor != 0 || w / divisor < 4 || h / divisor < 4) {
    throw DimensionError("register_mi: image size incompatible with pyramid depth");
  }

  std::vector<detail::Level> levels(static_cast<std::size_t>(config.pyramid_levels));
  levels[0].fixed = normalize_intensity(fixed);
  levels[0].moving = normalize_intensity(moving);
  for (std::size_t l = 1; l < levels.size(); ++l) {
    levels[l].fixed = detail::pyramid_down(levels[l - 1].fixed);
    levels[l].moving = detail::pyramid_down(levels[l - 1].moving);
  }
  for (std::size_t l = 0; l < levels.size(); ++l) {
    auto& L = levels[l];
    if (config.presmooth) {
      L.fixed = detail::binomial_blur(L.fixed);
      L.moving = detail::binomial_blur(L.moving);
    }
    L.scale = 1 << l;
    L.bins = level_bins(config.bins, L.fixed.width * L.fixed.height);
    for (float v : L.fixed.pixels) L.fixed_bins.push_back(intensity_bin(v, L.bins));
  }

  auto score_at = [&](const detail::Vec6& x, const detail::Level& L) {
    return detail::level_score(L, detail::level_sampling(detail::decode(x, b, w, h), L), config.min_overlap);
  };

  // Seeded starts: restart 0 is the identity. The others are stratified in
  // rotation over 75% of its range, where local optima are most common, and
  // uniform within half the bounds in the remaining parameters.
  std::vector<detail::Vec6> starts(static_cast<std::size_t>(config.restarts));
  Rng rng(derive_seed(config.seed, 0x6d69));
  const double id_scale = ((1.0 - 0.5 * (b.min_scale + b.max_scale)) / (0.5 * (b.max_scale - b.min_scale)));
  const double strata = static_cast<double>(config.restarts - 1);
  for (std::size_t r = 0; r < starts.size(); ++r) {
    starts[r] = {0.0, id_scale, id_scale, 0.0, 0.0, 0.0};
    if (r == 0) continue;
    for (auto& v : starts[r]) v += rng.uniform(-0.5, 0.5);
    starts[r][0] = -0.75 + 1.5 * (static_cast<double>(r - 1) + rng.uniform(0.0, 1.0)) / strata;
  }

  auto run_restart = [&](std::size_t r) {
    detail::RestartOutcome out;
    detail::Vec6 x = detail::clamp_box(starts[r]);
    double step = config.initial_step;
    for (int l = config.pyramid_levels - 1; l >= 0; --l) {
      const auto& L = levels[static_cast<std::size_t>(l)];
      auto f = [&](const detail::Vec6& v) { return score_at(v, L); };
      out.level_start.push_back(f(x));
      // A collapsed simplex can stall away from the optimum; re-seed it once
      // around the point it collapsed to.
      auto nm = detail::nelder_mead_maximize(f, x, step, config.max_iters, config.tolerance);
      const auto again = detail::nelder_mead_maximize(f, nm.x, step, config.max_iters, config.tolerance);
      if (again.value > nm.value) nm = again;
      nm.converged = nm.converged && again.converged;
      x = nm.x;
      out.level_final.push_back(nm.value);
      out.converged = nm.converged;
      step *= 0.5;
    }
    out.x = x;
    out.score = out.level_final.back();
    return out;
  };

  std::vector<detail::RestartOutcome> outcomes(starts.size());
  const int jobs = std::max(1, std::min(config.jobs, config.restarts));
  if (jobs == 1) {
    for (std::size_t r = 0; r < starts.size(); ++r) outcomes[r] = run_restart(r);
  } else {
    for (std::size_t first = 0; first < starts.size(); first += static_cast<std::size_t>(jobs)) {
      std::vector<std::thread> pool;
      for (std::size_t r = first; r < std::min(starts.size(), first + static_cast<std::size_t>(jobs)); ++r) {
        pool.emplace_back([&, r] { outcomes[r] = run_restart(r); });
      }
      for (auto& t : pool) t.join();
    }
  }

  MiResult result;
  result.restarts_used = config.restarts;
  result.identity_score = detail::level_score(levels[0], AffineMatrix::identity(), config.min_overlap);
  std::size_t best = 0;
  for (std::size_t r = 1; r < outcomes.size(); ++r) {
    if (outcomes[r].score > outcomes[best].score) best = r;
  }
  const auto& win = outcomes[best];
  if (!std::isfinite(win.score) || win.score < result.identity_score) {
    result.matrix = AffineMatrix::identity();
    result.sampling_geometry = AffineGeometry{};
    result.mi_score = result.identity_score;
    result.warning = true;
    result.warning_message = "no restart improved on the identity transform";
    return result;
  }
  result.winning_restart = static_cast<int>(best);
  result.sampling_geometry = detail::decode(win.x, b, w, h);
  result.matrix = invert(from_geometry(result.sampling_geometry, image_centre(w, h)));
  result.mi_score = win.score;
  result.converged = win.converged;
  result.level_start_scores = win.level_start;
  result.level_final_scores = win.level_final;
  return result;
}

}  // namespace regnet
