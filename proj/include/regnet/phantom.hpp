#pragma once
// Synthetic two-modality brain phantoms with analytic ground truth.
//
// Anatomy lives in the MRI (fixed) frame. The MSOT (moving) rendering of the
// same anatomy is produced through the misalignment point map P: the MSOT
// pixel q shows the tissue found at P(q) in the MRI frame, so MSOT landmarks
// are P^-1 applied to the MRI landmarks and P maps them back exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "regnet/affine.hpp"
#include "regnet/image.hpp"
#include "regnet/metrics.hpp"
#include "regnet/random.hpp"

namespace regnet {

inline constexpr int kLandmarkCount = 5;

/// Bounds of the random MSOT perturbation. The geometry is drawn for the
/// sampling direction (MRI pixel -> MSOT pixel); misalignment is its inverse.
struct PerturbationRange {
  double max_rotation_deg = 20.0;
  double min_scale = 0.85;
  double max_scale = 1.15;
  double max_shear = 0.05;
  double max_translation_fraction = 15.0 / 256.0;  // of image width

  static PerturbationRange none() { return {0.0, 1.0, 1.0, 0.0, 0.0}; }
};

struct PhantomOptions {
  PerturbationRange perturbation;
  // Slices of one subject share anatomy; unset means the phantom seed.
  std::optional<std::uint64_t> anatomy_seed;
};

struct Phantom {
  std::uint64_t seed = 0;
  Index size = 0;
  Image mri_image;
  Image msot_image;
  Mask brain_mask;  // MRI frame
  Mask msot_mask;   // same brain in the MSOT frame
  AffineMatrix misalignment;  // MSOT -> MRI point map, pixel convention
  AffineGeometry sampling_geometry;  // parameters of invert(misalignment)
  std::vector<Landmark> mri_landmarks;
  std::vector<Landmark> msot_landmarks;

  std::vector<LandmarkPair> landmark_pairs() const { return pair_landmarks(msot_landmarks, mri_landmarks); }
};

inline bool valid_phantom_size(Index size) { return size == 64 || size == 128 || size == 256; }

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry;  // image-width units, anatomy frame

  /// Approximate signed distance in the same units (negative inside).
  double signed_distance(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double q = dx * dx / (rx * rx) + dy * dy / (ry * ry);
    const double gx = 2 * dx / (rx * rx), gy = 2 * dy / (ry * ry);
    const double g = std::sqrt(gx * gx + gy * gy);
    if (g < 1e-12) return -std::min(rx, ry);
    return (q - 1.0) / g;
  }

  Point2 at_angle(double deg, double radius_fraction) const {
    const double t = deg * 3.14159265358979323846 / 180.0;
    return {cx + radius_fraction * rx * std::cos(t), cy + radius_fraction * ry * std::sin(t)};
  }
};

struct Anatomy {
  double size = 64;
  Point2 centre;        // pixels
  double rotation = 0;  // radians
  Ellipse head{}, upper{}, lower{};
  std::array<double, 6> texture{};  // frequencies and phases
  std::array<Point2, kLandmarkCount> landmarks{};  // pixels, MRI frame

  /// Pixel position -> anatomy-frame coordinates in image-width units.
  Point2 local(Point2 p) const {
    const double dx = (p.x - centre.x) / size, dy = (p.y - centre.y) / size;
    const double c = std::cos(rotation), s = std::sin(rotation);
    return {c * dx + s * dy, -s * dx + c * dy};
  }

  Point2 to_pixel(Point2 l) const {
    const double c = std::cos(rotation), s = std::sin(rotation);
    return {centre.x + size * (c * l.x - s * l.y), centre.y + size * (s * l.x + c * l.y)};
  }

  // Signed distances in pixels.
  double head_distance(Point2 l) const { return head.signed_distance(l.x, l.y) * size; }
  double brain_distance(Point2 l) const {
    return std::min(upper.signed_distance(l.x, l.y), lower.signed_distance(l.x, l.y)) * size;
  }
};

inline double coverage(double signed_distance_px) { return std::clamp(0.5 - signed_distance_px, 0.0, 1.0); }

inline double draw(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(0.0, 1.0); }

inline Anatomy make_anatomy(std::uint64_t seed, Index size) {
  Rng rng(derive_seed(seed, 0x616e61));
  Anatomy a;
  a.size = static_cast<double>(size);
  const Point2 c = image_centre(size, size);
  a.centre = {c.x + draw(rng, -0.08, 0.08) * a.size, c.y + draw(rng, -0.08, 0.08) * a.size};
  a.rotation = draw(rng, -6.0, 6.0) * 3.14159265358979323846 / 180.0;
  const double k = draw(rng, 0.92, 1.08);
  a.head = {0.0, 0.0, 0.39 * draw(rng, 0.95, 1.03), 0.34 * draw(rng, 0.95, 1.03)};
  a.upper = {0.0, -0.045, 0.29 * k * draw(rng, 0.95, 1.05), 0.185 * k * draw(rng, 0.95, 1.05)};
  a.lower = {draw(rng, -0.02, 0.02), 0.12, 0.17 * k * draw(rng, 0.92, 1.08), 0.11 * k * draw(rng, 0.92, 1.08)};
  a.texture = {draw(rng, 14, 22), draw(rng, 14, 22), draw(rng, 0, 6.28), draw(rng, 0, 6.28), draw(rng, 30, 40),
               draw(rng, 0, 6.28)};
  // Three points along the upper cortex, two on the lower lobe.
  const double upper_angles[3] = {-150.0, -90.0, -30.0};
  for (int i = 0; i < 3; ++i) {
    a.landmarks[i] = a.to_pixel(a.upper.at_angle(upper_angles[i] + draw(rng, -8, 8), draw(rng, 0.72, 0.82)));
  }
  a.landmarks[3] = a.to_pixel(a.lower.at_angle(135.0 + draw(rng, -8, 8), draw(rng, 0.6, 0.7)));
  a.landmarks[4] = a.to_pixel(a.lower.at_angle(45.0 + draw(rng, -8, 8), draw(rng, 0.6, 0.7)));
  return a;
}

inline AffineGeometry draw_geometry(const PerturbationRange& r, Index size, Rng& rng) {
  AffineGeometry g;
  g.rotation_deg = draw(rng, -r.max_rotation_deg, r.max_rotation_deg);
  g.scale_x = draw(rng, r.min_scale, r.max_scale);
  g.scale_y = draw(rng, r.min_scale, r.max_scale);
  g.shear = draw(rng, -r.max_shear, r.max_shear);
  const double t = r.max_translation_fraction * static_cast<double>(size);
  g.tx = draw(rng, -t, t);
  g.ty = draw(rng, -t, t);
  return g;
}

inline double mri_intensity(const Anatomy& a, Point2 p) {
  const Point2 l = a.local(p);
  const double head = coverage(a.head_distance(l));
  const double brain = coverage(a.brain_distance(l));
  const auto& t = a.texture;
  const double texture = 0.06 * std::sin(t[0] * l.x + t[2]) * std::cos(t[1] * l.y + t[3]) +
                         0.03 * std::sin(t[4] * (l.x + l.y) + t[5]);
  return 0.03 + 0.32 * head + (0.38 + texture) * brain;
}

inline double msot_intensity(const Anatomy& a, Point2 p) {
  const Point2 l = a.local(p);
  const double head_d = a.head_distance(l);
  const double head = coverage(head_d);
  const double brain = coverage(a.brain_distance(l));
  const double rim_width = 0.02 * a.size;
  // Skin signal peaks just inside the head boundary and stops at it.
  const double rim_offset = head_d + rim_width;
  const double rim = 0.55 * head * std::exp(-(rim_offset * rim_offset) / (rim_width * rim_width));
  const double sigma = 0.014 * a.size;
  double vessels = 0.0;
  for (const auto& v : a.landmarks) {
    const double dx = p.x - v.x, dy = p.y - v.y;
    vessels += 0.6 * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
  }
  return 0.05 + 0.2 * head + 0.2 * brain + rim + vessels;
}

}  // namespace detail

/// Deterministic phantom for `seed` at size 64, 128 or 256.
inline Phantom generate_phantom(std::uint64_t seed, Index size, const PhantomOptions& options = {}) {
  if (!valid_phantom_size(size)) {
    throw std::invalid_argument("generate_phantom: size must be 64, 128 or 256, got " + std::to_string(size));
  }
  const auto anatomy = detail::make_anatomy(options.anatomy_seed.value_or(seed), size);
  Rng geometry_rng(derive_seed(seed, 0x67656f));
  Rng mri_noise(derive_seed(seed, 0x6d7269));
  Rng msot_noise(derive_seed(seed, 0x6d736f74));

  Phantom ph;
  ph.seed = seed;
  ph.size = size;
  ph.sampling_geometry = detail::draw_geometry(options.perturbation, size, geometry_rng);
  const AffineMatrix sampling = from_geometry(ph.sampling_geometry, image_centre(size, size));
  ph.misalignment = invert(sampling);

  ph.mri_image = Image(size, size);
  ph.msot_image = Image(size, size);
  ph.brain_mask = Mask(size, size);
  ph.msot_mask = Mask(size, size);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const Point2 p{static_cast<double>(x), static_cast<double>(y)};
      const double mri = detail::mri_intensity(anatomy, p) + mri_noise.normal(0.0, 0.02);
      ph.mri_image.at(x, y) = static_cast<float>(std::clamp(mri, 0.0, 1.0));
      ph.brain_mask.at(x, y) = anatomy.brain_distance(anatomy.local(p)) <= 0.0 ? 1 : 0;

      const Point2 q = ph.misalignment.apply(p);
      const double speckle = 1.0 + 0.35 * msot_noise.normal();
      const double msot = detail::msot_intensity(anatomy, q) * speckle + msot_noise.normal(0.0, 0.05);
      ph.msot_image.at(x, y) = static_cast<float>(std::clamp(msot, 0.0, 1.0));
      ph.msot_mask.at(x, y) = anatomy.brain_distance(anatomy.local(q)) <= 0.0 ? 1 : 0;
    }
  }
  for (int i = 0; i < kLandmarkCount; ++i) {
    const std::string id = std::to_string(i + 1);
    ph.mri_landmarks.push_back({id, anatomy.landmarks[i]});
    ph.msot_landmarks.push_back({id, sampling.apply(anatomy.landmarks[i])});
  }
  return ph;
}

/// Minimum signed head distance (pixels, negative inside) over brain pixels;
/// negative means the brain lies strictly inside the head.
inline double brain_head_clearance(std::uint64_t seed, Index size, const PhantomOptions& options = {}) {
  const auto a = detail::make_anatomy(options.anatomy_seed.value_or(seed), size);
  double worst = -1e9;
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const Point2 l = a.local({static_cast<double>(x), static_cast<double>(y)});
      if (a.brain_distance(l) <= 0.0) worst = std::max(worst, a.head_distance(l));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Augmentation by rotation and scaling about the image centre.

struct AugmentOptions {
  double max_rotation_deg = 15.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
};

struct AugmentedSample {
  Image image;
  Mask mask;
  AffineMatrix transform;  // original pixel -> augmented pixel
};

inline AffineMatrix draw_augmentation(const AugmentOptions& o, Index width, Index height, Rng& rng) {
  AffineGeometry g;
  g.rotation_deg = detail::draw(rng, -o.max_rotation_deg, o.max_rotation_deg);
  g.scale_x = g.scale_y = detail::draw(rng, o.min_scale, o.max_scale);
  return from_geometry(g, image_centre(width, height));
}

/// Original first, then `n_variants` rotated and scaled copies. Images are
/// resampled bilinearly and masks by nearest neighbour.
inline std::vector<AugmentedSample> augment(const Image& image, const Mask& mask, int n_variants,
                                            const AugmentOptions& options, std::uint64_t seed) {
  if (n_variants < 1) throw std::invalid_argument("augment: n_variants must be >= 1");
  if (image.width != mask.width || image.height != mask.height) throw DimensionError("augment: image/mask size");
  std::vector<AugmentedSample> out;
  out.push_back({image, mask, AffineMatrix::identity()});
  Rng rng(derive_seed(seed, 0x617567));
  for (int i = 0; i < n_variants; ++i) {
    const auto t = draw_augmentation(options, image.width, image.height, rng);
    const auto sampling = invert(t);
    out.push_back({warp_image(image, sampling), warp_mask(mask, sampling), t});
  }
  return out;
}

}  // namespace regnet
