#pragma once
// One gradient-check case per differentiable op. Random inputs keep a margin
// from non-differentiable points (ReLU at 0, max-pool ties, the Smooth-L1
// transition, bilinear sample positions on pixel lines) so central differences
// never straddle a kink.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "regnet/grid_sample.hpp"
#include "support/gradcheck.hpp"

namespace regnet::testing {

struct OpCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

inline DTensor away_from_zero(Shape shape, Rng& rng, double margin = 0.01) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) {
    do {
      x = rng.uniform(-1.0, 1.0);
    } while (std::abs(x) < margin);
  }
  return DTensor(std::move(shape), std::move(v), true);
}

/// Distinct values separated by at least `gap`, randomly arranged.
inline DTensor separated_values(Shape shape, Rng& rng, double gap = 0.01) {
  const auto n = static_cast<std::size_t>(numel(shape));
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + gap * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng.engine());
  return DTensor(std::move(shape), std::move(v), true);
}

/// Smooth pattern windowed to vanish at the border, so zero padding outside
/// the image does not introduce a slope discontinuity.
inline DTensor smooth_image(Index batch, Index ch, Index h, Index w, Rng& rng) {
  constexpr double pi = 3.14159265358979323846;
  std::vector<double> v(static_cast<std::size_t>(batch * ch * h * w));
  for (Index b = 0; b < batch * ch; ++b) {
    const double fx = rng.uniform(0.1, 0.3), fy = rng.uniform(0.1, 0.3), ph = rng.uniform(0, 6.28);
    const double amp = rng.uniform(0.5, 1.5), off = rng.uniform(0.5, 1.0);
    for (Index y = 0; y < h; ++y) {
      const double wy = std::pow(std::sin(pi * (y + 0.5) / h), 2);
      for (Index x = 0; x < w; ++x) {
        const double wx = std::pow(std::sin(pi * (x + 0.5) / w), 2);
        v[(b * h + y) * w + x] = wx * wy * (off + amp * std::sin(fx * x + ph) * std::cos(fy * y - 0.5 * ph));
      }
    }
  }
  return DTensor(Shape{batch, ch, h, w}, std::move(v), true);
}

inline DTensor near_identity_theta(Index batch, Rng& rng, double spread = 0.15) {
  std::vector<double> v(static_cast<std::size_t>(batch * 6));
  const double id[6] = {1, 0, 0, 0, 1, 0};
  for (Index n = 0; n < batch; ++n) {
    for (int k = 0; k < 6; ++k) v[n * 6 + k] = id[k] + rng.uniform(-spread, spread);
  }
  return DTensor(Shape{batch, 6}, std::move(v), true);
}

/// True when a perturbation of any theta entry by up to h cannot move a
/// sample position across an integer pixel line (bilinear kink).
inline bool samples_clear_of_grid(const DTensor& theta, Index h, Index w, double step) {
  auto clear = [](double p, double margin) {
    const double frac = p - std::floor(p);
    return frac > margin && frac < 1.0 - margin;
  };
  for (Index n = 0; n < theta.dim(0); ++n) {
    const double* th = theta.data().data() + n * 6;
    for (Index i = 0; i < h; ++i) {
      const double v = pixel_to_normalized_coord(static_cast<double>(i), h);
      for (Index j = 0; j < w; ++j) {
        const double u = pixel_to_normalized_coord(static_cast<double>(j), w);
        const double reach = 2.0 * step * (std::abs(u) + std::abs(v) + 1.0);
        const double xs = normalized_to_pixel_coord(th[0] * u + th[1] * v + th[2], w);
        const double ys = normalized_to_pixel_coord(th[3] * u + th[4] * v + th[5], h);
        if (!clear(xs, reach * w / 2.0) || !clear(ys, reach * h / 2.0)) return false;
      }
    }
  }
  return true;
}

inline DTensor grid_safe_theta(Index batch, Index h, Index w, Rng& rng, double step = 1e-3) {
  for (;;) {
    auto theta = near_identity_theta(batch, rng, 0.1);
    if (samples_clear_of_grid(theta, h, w, step)) return theta;
  }
}

inline std::vector<OpCase> differentiable_op_cases() {
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, auto body) {
    cases.push_back({std::move(name), [body](std::uint64_t seed) {
                       Rng rng(derive_seed(seed, 0x67726164));
                       return body(rng);
                     }});
  };

  add_case("conv2d k3 s1 p1", [](Rng& rng) {
    return gradcheck([](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); },
                     {random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng),
                      random_tensor({4}, rng)},
                     rng);
  });
  add_case("conv2d k5 s1 p0", [](Rng& rng) {
    return gradcheck([](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 0); },
                     {random_tensor({1, 2, 8, 8}, rng), random_tensor({3, 2, 5, 5}, rng),
                      random_tensor({3}, rng)},
                     rng);
  });
  add_case("conv2d k3 s2 p1", [](Rng& rng) {
    return gradcheck([](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); },
                     {random_tensor({1, 2, 7, 7}, rng), random_tensor({2, 2, 3, 3}, rng),
                      random_tensor({2}, rng)},
                     rng);
  });
  add_case("maxpool2d", [](Rng& rng) {
    return gradcheck([](const auto& in) { return maxpool2d(in[0], 2); }, {separated_values({2, 2, 6, 7}, rng)},
                     rng);
  });
  add_case("upsample_nearest2x", [](Rng& rng) {
    return gradcheck([](const auto& in) { return upsample_nearest2x(in[0]); }, {random_tensor({2, 2, 3, 4}, rng)},
                     rng);
  });
  add_case("concat_channels", [](Rng& rng) {
    return gradcheck([](const auto& in) { return concat_channels(in[0], in[1]); },
                     {random_tensor({2, 2, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)}, rng);
  });
  add_case("slice_channels", [](Rng& rng) {
    return gradcheck([](const auto& in) { return slice_channels(in[0], 1, 2); }, {random_tensor({2, 4, 3, 3}, rng)},
                     rng);
  });
  add_case("flatten", [](Rng& rng) {
    return gradcheck([](const auto& in) { return flatten(in[0]); }, {random_tensor({2, 3, 2, 2}, rng)}, rng);
  });
  add_case("linear", [](Rng& rng) {
    return gradcheck([](const auto& in) { return linear(in[0], in[1], in[2]); },
                     {random_tensor({3, 7}, rng), random_tensor({5, 7}, rng), random_tensor({5}, rng)}, rng);
  });
  add_case("relu", [](Rng& rng) {
    return gradcheck([](const auto& in) { return relu(in[0]); }, {away_from_zero({2, 3, 4, 4}, rng)}, rng);
  });
  add_case("sigmoid", [](Rng& rng) {
    return gradcheck([](const auto& in) { return sigmoid(in[0]); }, {random_tensor({2, 3, 4, 4}, rng, -4, 4)},
                     rng);
  });
  add_case("add", [](Rng& rng) {
    return gradcheck([](const auto& in) { return add(in[0], in[1]); },
                     {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, rng);
  });
  add_case("mul", [](Rng& rng) {
    return gradcheck([](const auto& in) { return mul(in[0], in[1]); },
                     {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, rng);
  });
  add_case("scale", [](Rng& rng) {
    const double factor = rng.uniform(-2, 2);
    return gradcheck([factor](const auto& in) { return scale(in[0], factor); }, {random_tensor({3, 4}, rng)}, rng);
  });
  add_case("sum", [](Rng& rng) {
    return gradcheck([](const auto& in) { return sum(in[0]); }, {random_tensor({2, 5}, rng)}, rng);
  });
  add_case("mean", [](Rng& rng) {
    return gradcheck([](const auto& in) { return mean(in[0]); }, {random_tensor({2, 5}, rng)}, rng);
  });
  add_case("bce_loss", [](Rng& rng) {
    auto target = random_tensor({2, 1, 4, 4}, rng, 0, 1, false);
    for (auto& t : target.mutable_data()) t = t < 0.5 ? 0.0 : 1.0;
    return gradcheck([target](const auto& in) { return bce_loss(in[0], target); },
                     {random_tensor({2, 1, 4, 4}, rng, 0.05, 0.95)}, rng);
  });
  add_case("smooth_l1_loss", [](Rng& rng) {
    auto a = random_tensor({4, 6}, rng, -3, 3);
    auto b = random_tensor({4, 6}, rng, -3, 3);
    // Keep |a - b| away from the transition at 1.
    for (Index i = 0; i < a.numel(); ++i) {
      const double d = a.data()[i] - b.data()[i];
      if (std::abs(std::abs(d) - 1.0) < 0.01) a.mutable_data()[i] += 0.05;
    }
    return gradcheck([](const auto& in) { return smooth_l1_loss(in[0], in[1]); }, {a, b}, rng);
  });
  add_case("mse_loss", [](Rng& rng) {
    return gradcheck([](const auto& in) { return mse_loss(in[0], in[1]); },
                     {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng)}, rng);
  });
  add_case("affine_grid_sample", [](Rng& rng) {
    return gradcheck([](const auto& in) { return affine_grid_sample(in[0], in[1]); },
                     {smooth_image(2, 2, 8, 8, rng), grid_safe_theta(2, 8, 8, rng)}, rng);
  });
  add_case("affine_matmul", [](Rng& rng) {
    return gradcheck([](const auto& in) { return affine_matmul(in[0], in[1]); },
                     {random_tensor({3, 6}, rng), random_tensor({3, 6}, rng)}, rng);
  });
  return cases;
}

}  // namespace regnet::testing
