#pragma once
// Affine grid generation and bilinear sampling.
//
// Coordinate convention (shared with affine.hpp): pixel index i along an axis
// of length n sits at its centre, normalized coordinate u = (2i + 1)/n - 1.
// theta is a [B,6] tensor (a, b, tx, c, d, ty) mapping output normalized
// coordinates to the input normalized coordinates that are sampled.

#include <cmath>
#include <vector>

#include "regnet/ops.hpp"

namespace regnet {

inline double pixel_to_normalized_coord(double pixel, Index extent) {
  return (2.0 * pixel + 1.0) / static_cast<double>(extent) - 1.0;
}

inline double normalized_to_pixel_coord(double u, Index extent) {
  return ((u + 1.0) * static_cast<double>(extent) - 1.0) / 2.0;
}

namespace detail {

struct BilinearTap {
  Index x0, y0;
  double fx, fy;
};

inline BilinearTap bilinear_tap(double x, double y) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  return {static_cast<Index>(fx0), static_cast<Index>(fy0), x - fx0, y - fy0};
}

template <typename T>
double pixel_or_zero(const T* plane, Index h, Index w, Index y, Index x) {
  return (x >= 0 && x < w && y >= 0 && y < h) ? static_cast<double>(plane[y * w + x]) : 0.0;
}

}  // namespace detail

/// Warps image [B,C,H,W] by theta [B,6]. Samples outside the input read zero.
/// Differentiable with respect to both the image and theta.
template <typename T>
BasicTensor<T> affine_grid_sample(const BasicTensor<T>& image, const BasicTensor<T>& theta) {
  detail::require_rank(image.shape(), 4, "affine_grid_sample image");
  detail::require_rank(theta.shape(), 2, "affine_grid_sample theta");
  const Index batch = image.dim(0), ch = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (theta.dim(0) != batch || theta.dim(1) != 6) {
    throw DimensionError("affine_grid_sample: theta must be [" + std::to_string(batch) + ",6], got " +
                         to_string(theta.shape()));
  }
  Buffer<T> out(static_cast<std::size_t>(image.numel()));
  const T* img = image.data().data();
  for (Index b = 0; b < batch; ++b) {
    const T* th = theta.data().data() + b * 6;
    for (Index i = 0; i < h; ++i) {
      const double v = pixel_to_normalized_coord(static_cast<double>(i), h);
      for (Index j = 0; j < w; ++j) {
        const double u = pixel_to_normalized_coord(static_cast<double>(j), w);
        const double xs = normalized_to_pixel_coord(th[0] * u + th[1] * v + th[2], w);
        const double ys = normalized_to_pixel_coord(th[3] * u + th[4] * v + th[5], h);
        const auto tap = detail::bilinear_tap(xs, ys);
        for (Index c = 0; c < ch; ++c) {
          const T* plane = img + (b * ch + c) * h * w;
          const double v00 = detail::pixel_or_zero(plane, h, w, tap.y0, tap.x0);
          const double v01 = detail::pixel_or_zero(plane, h, w, tap.y0, tap.x0 + 1);
          const double v10 = detail::pixel_or_zero(plane, h, w, tap.y0 + 1, tap.x0);
          const double v11 = detail::pixel_or_zero(plane, h, w, tap.y0 + 1, tap.x0 + 1);
          const double val = (1 - tap.fy) * ((1 - tap.fx) * v00 + tap.fx * v01) +
                             tap.fy * ((1 - tap.fx) * v10 + tap.fx * v11);
          out[((b * ch + c) * h + i) * w + j] = static_cast<T>(val);
        }
      }
    }
  }

  auto ii = image.impl();
  auto ti = theta.impl();
  return detail::make_result<T>(
      image.shape(), std::move(out), "affine_grid_sample", {&image, &theta},
      [ii, ti, batch, ch, h, w](const TensorImpl<T>& out) {
        T* dimg = ii->requires_grad ? ii->ensure_grad().data() : nullptr;
        T* dth = ti->requires_grad ? ti->ensure_grad().data() : nullptr;
        for (Index b = 0; b < batch; ++b) {
          const T* th = ti->data.data() + b * 6;
          double acc[6] = {0, 0, 0, 0, 0, 0};
          for (Index i = 0; i < h; ++i) {
            const double v = pixel_to_normalized_coord(static_cast<double>(i), h);
            for (Index j = 0; j < w; ++j) {
              const double u = pixel_to_normalized_coord(static_cast<double>(j), w);
              const double xs = normalized_to_pixel_coord(th[0] * u + th[1] * v + th[2], w);
              const double ys = normalized_to_pixel_coord(th[3] * u + th[4] * v + th[5], h);
              const auto tap = detail::bilinear_tap(xs, ys);
              double gx = 0.0, gy = 0.0;
              for (Index c = 0; c < ch; ++c) {
                const double g = out.grad[((b * ch + c) * h + i) * w + j];
                if (g == 0.0) continue;
                const Index base = (b * ch + c) * h * w;
                if (dimg != nullptr) {
                  const double wts[4] = {(1 - tap.fx) * (1 - tap.fy), tap.fx * (1 - tap.fy),
                                         (1 - tap.fx) * tap.fy, tap.fx * tap.fy};
                  const Index xs4[4] = {tap.x0, tap.x0 + 1, tap.x0, tap.x0 + 1};
                  const Index ys4[4] = {tap.y0, tap.y0, tap.y0 + 1, tap.y0 + 1};
                  for (int k = 0; k < 4; ++k) {
                    if (xs4[k] >= 0 && xs4[k] < w && ys4[k] >= 0 && ys4[k] < h) {
                      dimg[base + ys4[k] * w + xs4[k]] += static_cast<T>(g * wts[k]);
                    }
                  }
                }
                if (dth != nullptr) {
                  const T* plane = ii->data.data() + base;
                  const double v00 = detail::pixel_or_zero(plane, h, w, tap.y0, tap.x0);
                  const double v01 = detail::pixel_or_zero(plane, h, w, tap.y0, tap.x0 + 1);
                  const double v10 = detail::pixel_or_zero(plane, h, w, tap.y0 + 1, tap.x0);
                  const double v11 = detail::pixel_or_zero(plane, h, w, tap.y0 + 1, tap.x0 + 1);
                  gx += g * ((1 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                  gy += g * ((1 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                }
              }
              if (dth != nullptr) {
                // d(pixel x)/d(normalized x) = w/2, likewise for y.
                gx *= 0.5 * static_cast<double>(w);
                gy *= 0.5 * static_cast<double>(h);
                acc[0] += gx * u;
                acc[1] += gx * v;
                acc[2] += gx;
                acc[3] += gy * u;
                acc[4] += gy * v;
                acc[5] += gy;
              }
            }
          }
          if (dth != nullptr) {
            for (int k = 0; k < 6; ++k) dth[b * 6 + k] += static_cast<T>(acc[k]);
          }
        }
      });
}

/// Row-wise product of two batches of affine matrices in (a, b, tx, c, d, ty)
/// layout, each with an implicit [0 0 1] last row: result = lhs * rhs.
template <typename T>
BasicTensor<T> affine_matmul(const BasicTensor<T>& lhs, const BasicTensor<T>& rhs) {
  detail::require_same_shape(lhs, rhs, "affine_matmul");
  detail::require_rank(lhs.shape(), 2, "affine_matmul");
  if (lhs.dim(1) != 6) throw DimensionError("affine_matmul: expects [B,6], got " + to_string(lhs.shape()));
  const Index batch = lhs.dim(0);
  Buffer<T> out(static_cast<std::size_t>(batch * 6));
  for (Index n = 0; n < batch; ++n) {
    const T* a = lhs.data().data() + n * 6;
    const T* b = rhs.data().data() + n * 6;
    T* c = out.data() + n * 6;
    c[0] = a[0] * b[0] + a[1] * b[3];
    c[1] = a[0] * b[1] + a[1] * b[4];
    c[2] = a[0] * b[2] + a[1] * b[5] + a[2];
    c[3] = a[3] * b[0] + a[4] * b[3];
    c[4] = a[3] * b[1] + a[4] * b[4];
    c[5] = a[3] * b[2] + a[4] * b[5] + a[5];
  }
  auto li = lhs.impl();
  auto ri = rhs.impl();
  return detail::make_result<T>(
      Shape{batch, 6}, std::move(out), "affine_matmul", {&lhs, &rhs},
      [li, ri, batch](const TensorImpl<T>& out) {
        for (Index n = 0; n < batch; ++n) {
          const T* a = li->data.data() + n * 6;
          const T* b = ri->data.data() + n * 6;
          const T* g = out.grad.data() + n * 6;
          if (li->requires_grad) {
            T* da = li->ensure_grad().data() + n * 6;
            da[0] += g[0] * b[0] + g[1] * b[1] + g[2] * b[2];
            da[1] += g[0] * b[3] + g[1] * b[4] + g[2] * b[5];
            da[2] += g[2];
            da[3] += g[3] * b[0] + g[4] * b[1] + g[5] * b[2];
            da[4] += g[3] * b[3] + g[4] * b[4] + g[5] * b[5];
            da[5] += g[5];
          }
          if (ri->requires_grad) {
            T* db = ri->ensure_grad().data() + n * 6;
            db[0] += a[0] * g[0] + a[3] * g[3];
            db[1] += a[0] * g[1] + a[3] * g[4];
            db[2] += a[0] * g[2] + a[3] * g[5];
            db[3] += a[1] * g[0] + a[4] * g[3];
            db[4] += a[1] * g[1] + a[4] * g[4];
            db[5] += a[1] * g[2] + a[4] * g[5];
          }
        }
      });
}

}  // namespace regnet
