#pragma once
// Two-stage spatial transformer registering an MSOT brain mask onto an MRI
// brain mask.
//
//   stage 1 (MSOT mask):              [conv5, pool, ReLU] x2, fc 500 ReLU, fc 6 -> theta1
//   stage 2 (warped MSOT, MRI masks): same stack on 2 channels                 -> theta2
//   final sampling theta = theta1 * theta2
//
// Thetas are sampling matrices in normalized coordinates: the output pixel at
// u reads the MSOT input at theta * u. Sampling with theta1 and then theta2
// reads MSOT at theta1 * theta2 * u, so the point map MSOT -> MRI of the final
// result is inverse(theta2) composed after inverse(theta1): the refinement
// applied on top of the pre-transform.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "regnet/affine.hpp"
#include "regnet/grid_sample.hpp"
#include "regnet/image.hpp"
#include "regnet/layers.hpp"

namespace regnet {

inline constexpr double kDefaultTransformAlpha = 0.001;
inline constexpr double kDegenerateDeterminant = 1e-6;

struct StnConfig {
  Index input_size = 256;
  Index conv_channels = 20;
  Index kernel = 5;
  Index hidden = 500;

  static StnConfig paper() { return {}; }
  static StnConfig desk() {
    StnConfig c;
    c.input_size = 64;
    return c;
  }

  /// Spatial side after two (conv, pool) blocks.
  Index feature_side() const {
    const Index s1 = conv_output_size(input_size, kernel, 1, 0) / 2;
    return conv_output_size(s1, kernel, 1, 0) / 2;
  }

  Index flatten_size() const { return conv_channels * feature_side() * feature_side(); }

  void validate() const {
    if (input_size != 64 && input_size != 128 && input_size != 256) {
      throw ConfigError("stn: unsupported input size " + std::to_string(input_size) + " (64, 128 or 256)");
    }
    if (conv_channels < 1 || hidden < 1 || kernel < 1 || kernel % 2 == 0) {
      throw ConfigError("stn: channels and hidden width must be positive and the kernel odd");
    }
  }
};

inline bool operator==(const StnConfig& a, const StnConfig& b) {
  return a.input_size == b.input_size && a.conv_channels == b.conv_channels && a.kernel == b.kernel &&
         a.hidden == b.hidden;
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(StnConfig, input_size, conv_channels, kernel, hidden)

// ---------------------------------------------------------------------------
// Matrix <-> theta plumbing

/// Normalized AffineMatrix -> row of a [B,6] theta in (a, b, tx, c, d, ty) order.
inline std::array<float, 6> theta_of(const AffineMatrix& m) {
  if (m.convention != Convention::normalized) throw ContractError("theta_of: matrix must be normalized");
  const auto p = m.params();
  return {static_cast<float>(p[0]), static_cast<float>(p[1]), static_cast<float>(p[2]),
          static_cast<float>(p[3]), static_cast<float>(p[4]), static_cast<float>(p[5])};
}

inline Tensor thetas_to_tensor(const std::vector<AffineMatrix>& ms) {
  std::vector<float> v;
  v.reserve(ms.size() * 6);
  for (const auto& m : ms) {
    const auto t = theta_of(m);
    v.insert(v.end(), t.begin(), t.end());
  }
  return Tensor(Shape{static_cast<Index>(ms.size()), 6}, std::move(v));
}

inline AffineMatrix matrix_from_theta(const Tensor& theta, Index row = 0) {
  if (theta.rank() != 2 || theta.dim(1) != 6) throw DimensionError("matrix_from_theta: expects [B,6]");
  const float* t = theta.data().data() + row * 6;
  return AffineMatrix::from_params({t[0], t[1], t[2], t[3], t[4], t[5]}, Convention::normalized);
}

/// The sampling theta that realises a pixel point map MSOT -> MRI on size x size images.
inline AffineMatrix sampling_theta(const AffineMatrix& point_map, Index size) {
  return pixel_to_normalized(invert(point_map), size, size);
}

/// The pixel point map MSOT -> MRI encoded by a sampling theta.
inline AffineMatrix point_map_of(const AffineMatrix& theta, Index size) {
  return invert(normalized_to_pixel(theta, size, size));
}

// ---------------------------------------------------------------------------
// Network

struct StnStage {
  ConvLayer conv1, conv2;
  LinearLayer fc1, fc2;

  StnStage() = default;
  StnStage(Index in_channels, const StnConfig& c, Rng* rng)
      : conv1(in_channels, c.conv_channels, c.kernel, 0, rng),
        conv2(c.conv_channels, c.conv_channels, c.kernel, 0, rng),
        fc1(c.flatten_size(), c.hidden, rng),
        fc2(c.hidden, 6, rng) {
    // The regression head starts at the identity transform.
    std::fill(fc2.weight.mutable_data().begin(), fc2.weight.mutable_data().end(), 0.0f);
    const float identity[6] = {1, 0, 0, 0, 1, 0};
    std::copy(identity, identity + 6, fc2.bias.mutable_data().begin());
  }

  Tensor features(const Tensor& x) const {
    Tensor h = relu(maxpool2d(conv1(x), 2));
    h = relu(maxpool2d(conv2(h), 2));
    return flatten(h);
  }

  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(features(x)))); }

  void collect(const std::string& name, std::vector<NamedTensor>& out) const {
    conv1.collect(name + ".conv1", out);
    conv2.collect(name + ".conv2", out);
    fc1.collect(name + ".fc1", out);
    fc2.collect(name + ".fc2", out);
  }
};

struct StnOutput {
  Tensor theta1;  // pre-transform
  Tensor theta2;  // refinement
  Tensor theta;   // final sampling theta1 * theta2
  Tensor warped;  // MSOT mask warped by theta
};

class Stn {
 public:
  Stn() = default;

  Stn(const StnConfig& config, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x73746e));
    build(config, &rng);
  }

  /// Zero weights and the identity head, for loading a checkpoint.
  static Stn uninitialized(const StnConfig& config) {
    Stn net;
    net.build(config, nullptr);
    return net;
  }

  const StnConfig& config() const { return config_; }

  /// msot, mri: [B,1,S,S] masks as floats in {0,1}.
  StnOutput forward(const Tensor& msot, const Tensor& mri) const {
    const Index s = config_.input_size;
    for (const Tensor* t : {&msot, &mri}) {
      if (t->rank() != 4 || t->dim(1) != 1 || t->dim(2) != s || t->dim(3) != s) {
        throw DimensionError("stn: expected masks [B,1," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                             to_string(t->shape()));
      }
    }
    if (msot.dim(0) != mri.dim(0)) throw DimensionError("stn: batch sizes differ");
    StnOutput out;
    out.theta1 = stage1_(msot);
    const Tensor pre = affine_grid_sample(msot, out.theta1);
    out.theta2 = stage2_(concat_channels(pre, mri));
    out.theta = affine_matmul(out.theta1, out.theta2);
    out.warped = affine_grid_sample(msot, out.theta);
    return out;
  }

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    stage1_.collect("stage1", out);
    stage2_.collect("stage2", out);
    return out;
  }

  std::vector<Tensor> parameters() const { return tensors_of(named_parameters()); }
  Index parameter_count() const { return total_numel(named_parameters()); }

 private:
  void build(const StnConfig& config, Rng* rng) {
    config_ = config;
    config_.validate();
    stage1_ = StnStage(1, config_, rng);
    stage2_ = StnStage(2, config_, rng);
  }

  StnConfig config_;
  StnStage stage1_, stage2_;
};

inline Stn build_stn(const StnConfig& config, std::uint64_t seed = 0) { return Stn(config, seed); }

// ---------------------------------------------------------------------------
// Loss

/// SmoothL1 over the 6 normalized parameters plus alpha * MSE of the warped
/// MSOT masks. theta, theta_g: [B,6]; warped, target_warped: [B,1,S,S].
inline Tensor transform_loss(const Tensor& theta, const Tensor& theta_g, const Tensor& warped,
                             const Tensor& target_warped, double alpha = kDefaultTransformAlpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("transform_loss: alpha must be >= 0");
  const Tensor l1 = smooth_l1_loss(theta, theta_g);
  if (alpha == 0.0) return l1;
  return add(l1, scale(mse_loss(warped, target_warped), static_cast<float>(alpha)));
}

/// Matrix form. Pixel-convention matrices are compared after conversion to
/// the normalized convention of the warped tensors' extent.
inline Tensor transform_loss(const AffineMatrix& a, const AffineMatrix& a_g, const Tensor& warped,
                             const Tensor& target_warped, double alpha = kDefaultTransformAlpha) {
  if (a.convention != a_g.convention) {
    throw ContractError("transform_loss: matrices use " + to_string(a.convention) + " and " +
                        to_string(a_g.convention) + " conventions");
  }
  auto normalized = [&](const AffineMatrix& m) {
    if (m.convention == Convention::normalized) return m;
    if (warped.rank() != 4) throw DimensionError("transform_loss: warped must be [B,C,H,W]");
    return pixel_to_normalized(m, warped.dim(3), warped.dim(2));
  };
  return transform_loss(thetas_to_tensor({normalized(a)}), thetas_to_tensor({normalized(a_g)}), warped,
                        target_warped, alpha);
}

// ---------------------------------------------------------------------------
// Inference

struct StnPrediction {
  AffineMatrix matrix;    // pixel point map MSOT -> MRI
  AffineMatrix sampling;  // normalized sampling theta
  bool degenerate = false;
};

/// A near-singular or non-finite prediction is flagged and its matrix falls
/// back to identity.
inline StnPrediction predict_stn(const Stn& net, const Mask& msot_mask, const Mask& mri_mask) {
  const Index s = net.config().input_size;
  if (msot_mask.width != s || msot_mask.height != s || mri_mask.width != s || mri_mask.height != s) {
    throw DimensionError("stn: masks must be " + std::to_string(s) + "x" + std::to_string(s));
  }
  NoGradGuard guard;
  const auto out = net.forward(masks_to_tensor({&msot_mask}), masks_to_tensor({&mri_mask}));
  StnPrediction p;
  p.sampling = matrix_from_theta(out.theta);
  bool finite = true;
  for (double v : p.sampling.params()) finite = finite && std::isfinite(v);
  p.degenerate = !finite || std::abs(p.sampling.determinant()) < kDegenerateDeterminant;
  p.matrix = p.degenerate ? AffineMatrix::identity() : point_map_of(p.sampling, s);
  return p;
}

struct StnRegistration {
  AffineMatrix matrix;    // pixel point map MSOT -> MRI
  AffineMatrix sampling;  // normalized sampling theta
  Image warped;           // MSOT image on the MRI frame
  bool degenerate = false;
  double wall_time_seconds = 0.0;
};

/// Registers one pair of masks and warps the MSOT image with the result. The
/// warp is produced even for a degenerate prediction.
inline StnRegistration register_stn(const Stn& net, const Mask& msot_mask, const Mask& mri_mask,
                                    const Image& msot_image) {
  const auto start = std::chrono::steady_clock::now();
  const Index s = net.config().input_size;
  if (msot_image.width != s || msot_image.height != s) {
    throw DimensionError("register_stn: MSOT image must be " + std::to_string(s) + "x" + std::to_string(s));
  }
  const auto p = predict_stn(net, msot_mask, mri_mask);
  StnRegistration r;
  r.matrix = p.matrix;
  r.sampling = p.sampling;
  r.degenerate = p.degenerate;
  {
    NoGradGuard guard;
    r.warped = tensor_to_image(affine_grid_sample(image_to_tensor(msot_image), thetas_to_tensor({p.sampling})));
  }
  r.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace regnet
