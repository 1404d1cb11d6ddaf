#pragma once
// Planar affine matrices
//
//     | a  b  sx |
//     | c  d  sy |
//     | 0  0  1  |
//
// in either pixel coordinates (x = column, y = row, pixel centres on integer
// positions) or normalized coordinates (u = (2x + 1)/width - 1, so the image
// spans [-1, 1] edge to edge).
//
// Direction conventions used throughout the toolkit:
//   * A registration result maps MOVING (MSOT) points to FIXED (MRI) points.
//   * The sampler consumes the inverse direction: for each fixed-frame pixel
//     p it reads the moving image at sampling_matrix * p.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "regnet/tensor.hpp"

namespace regnet {

enum class Convention { pixel, normalized };

inline std::string to_string(Convention c) { return c == Convention::pixel ? "pixel" : "normalized"; }

class SingularMatrixError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline constexpr double kSingularTolerance = 1e-6;

struct AffineMatrix {
  double a = 1.0, b = 0.0, c = 0.0, d = 1.0, sx = 0.0, sy = 0.0;
  Convention convention = Convention::pixel;

  static AffineMatrix identity(Convention conv = Convention::pixel) {
    AffineMatrix m;
    m.convention = conv;
    return m;
  }

  static AffineMatrix translation(double tx, double ty, Convention conv = Convention::pixel) {
    AffineMatrix m = identity(conv);
    m.sx = tx;
    m.sy = ty;
    return m;
  }

  /// Parameters in sampler order (a, b, sx, c, d, sy).
  std::array<double, 6> params() const { return {a, b, sx, c, d, sy}; }

  static AffineMatrix from_params(const std::array<double, 6>& p, Convention conv) {
    return AffineMatrix{p[0], p[1], p[3], p[4], p[2], p[5], conv};
  }

  Point2 apply(Point2 p) const { return {a * p.x + b * p.y + sx, c * p.x + d * p.y + sy}; }

  double determinant() const { return a * d - b * c; }
  bool is_singular(double tolerance = kSingularTolerance) const { return std::abs(determinant()) < tolerance; }
};

inline bool operator==(const AffineMatrix& l, const AffineMatrix& r) {
  return l.params() == r.params() && l.convention == r.convention;
}

/// Largest absolute difference over the six free parameters.
inline double max_param_difference(const AffineMatrix& l, const AffineMatrix& r) {
  double worst = 0.0;
  const auto lp = l.params(), rp = r.params();
  for (int k = 0; k < 6; ++k) worst = std::max(worst, std::abs(lp[k] - rp[k]));
  return worst;
}

/// outer ∘ inner: compose(f, g).apply(p) == f.apply(g.apply(p)).
inline AffineMatrix compose(const AffineMatrix& outer, const AffineMatrix& inner) {
  if (outer.convention != inner.convention) {
    throw ContractError("compose: convention mismatch (" + to_string(outer.convention) + " vs " +
                        to_string(inner.convention) + ")");
  }
  return AffineMatrix{outer.a * inner.a + outer.b * inner.c,
                      outer.a * inner.b + outer.b * inner.d,
                      outer.c * inner.a + outer.d * inner.c,
                      outer.c * inner.b + outer.d * inner.d,
                      outer.a * inner.sx + outer.b * inner.sy + outer.sx,
                      outer.c * inner.sx + outer.d * inner.sy + outer.sy,
                      outer.convention};
}

inline AffineMatrix invert(const AffineMatrix& m) {
  const double det = m.determinant();
  if (std::abs(det) < kSingularTolerance) {
    throw SingularMatrixError("invert: singular affine matrix (determinant " + std::to_string(det) + ")");
  }
  AffineMatrix r;
  r.convention = m.convention;
  r.a = m.d / det;
  r.b = -m.b / det;
  r.c = -m.c / det;
  r.d = m.a / det;
  r.sx = -(r.a * m.sx + r.b * m.sy);
  r.sy = -(r.c * m.sx + r.d * m.sy);
  return r;
}

namespace detail {

/// Diagonal pixel -> normalized coordinate map for a width x height image.
inline AffineMatrix pixel_frame_to_normalized(Index width, Index height) {
  if (width < 2 || height < 2) throw ContractError("coordinate conversion needs width, height >= 2");
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  return AffineMatrix{2.0 / w, 0.0, 0.0, 2.0 / h, 1.0 / w - 1.0, 1.0 / h - 1.0, Convention::pixel};
}

inline AffineMatrix normalized_frame_to_pixel(Index width, Index height) {
  if (width < 2 || height < 2) throw ContractError("coordinate conversion needs width, height >= 2");
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  return AffineMatrix{w / 2.0, 0.0, 0.0, h / 2.0, (w - 1.0) / 2.0, (h - 1.0) / 2.0, Convention::pixel};
}

}  // namespace detail

/// Conjugates a pixel-convention matrix into normalized coordinates. Warping
/// with either representation yields the same image.
inline AffineMatrix pixel_to_normalized(const AffineMatrix& m, Index width, Index height) {
  if (m.convention != Convention::pixel) throw ContractError("pixel_to_normalized: matrix is not in pixel convention");
  auto to_norm = detail::pixel_frame_to_normalized(width, height);
  auto to_pix = detail::normalized_frame_to_pixel(width, height);
  auto r = compose(to_norm, compose(m, to_pix));
  r.convention = Convention::normalized;
  return r;
}

inline AffineMatrix normalized_to_pixel(const AffineMatrix& m, Index width, Index height) {
  if (m.convention != Convention::normalized) {
    throw ContractError("normalized_to_pixel: matrix is not in normalized convention");
  }
  auto to_norm = detail::pixel_frame_to_normalized(width, height);
  auto to_pix = detail::normalized_frame_to_pixel(width, height);
  AffineMatrix src = m;
  src.convention = Convention::pixel;
  return compose(to_pix, compose(src, to_norm));
}

/// Geometric parameterisation about a centre point:
///   M = T(centre + t) * R(rotation) * Shear(shear) * S(scale_x, scale_y) * T(-centre)
struct AffineGeometry {
  double rotation_deg = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  double shear = 0.0;
  double tx = 0.0;
  double ty = 0.0;
};

inline AffineMatrix from_geometry(const AffineGeometry& g, Point2 centre) {
  constexpr double pi = 3.14159265358979323846;
  const double th = g.rotation_deg * pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  // R * Shear * S with Shear = [[1, shear], [0, 1]].
  const double a = cs * g.scale_x;
  const double b = (cs * g.shear - sn) * g.scale_y;
  const double c = sn * g.scale_x;
  const double d = (sn * g.shear + cs) * g.scale_y;
  AffineMatrix m{a, b, c, d, 0.0, 0.0, Convention::pixel};
  m.sx = centre.x + g.tx - (a * centre.x + b * centre.y);
  m.sy = centre.y + g.ty - (c * centre.x + d * centre.y);
  return m;
}

inline Point2 image_centre(Index width, Index height) {
  return {(static_cast<double>(width) - 1.0) / 2.0, (static_cast<double>(height) - 1.0) / 2.0};
}

inline void to_json(nlohmann::json& j, const AffineMatrix& m) {
  j = nlohmann::json{{"a", m.a},   {"b", m.b},   {"c", m.c},
                     {"d", m.d},   {"sx", m.sx}, {"sy", m.sy},
                     {"convention", to_string(m.convention)}};
}

inline void from_json(const nlohmann::json& j, AffineMatrix& m) {
  m.a = j.at("a").get<double>();
  m.b = j.at("b").get<double>();
  m.c = j.at("c").get<double>();
  m.d = j.at("d").get<double>();
  m.sx = j.at("sx").get<double>();
  m.sy = j.at("sy").get<double>();
  const auto conv = j.at("convention").get<std::string>();
  if (conv == "pixel") {
    m.convention = Convention::pixel;
  } else if (conv == "normalized") {
    m.convention = Convention::normalized;
  } else {
    throw std::invalid_argument("affine matrix: unknown convention '" + conv + "'");
  }
}

}  // namespace regnet
