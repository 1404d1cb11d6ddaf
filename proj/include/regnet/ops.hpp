#pragma once
// Differentiable operations used by the segmentation and transformation
// networks. Every op validates shapes, computes its forward pass eagerly and
// records a backward rule when any input requires grad.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "regnet/tensor.hpp"

namespace regnet {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline Index conv_output_size(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

inline void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                         to_string(shape));
  }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

struct ConvGeometry {
  Index channels, height, width, kernel, stride, padding, out_height, out_width;
  Index rows() const { return channels * kernel * kernel; }
  Index cols() const { return out_height * out_width; }
};

/// Output columns [lo, hi) whose input column ox * stride - padding + kx lies inside the image.
inline std::pair<Index, Index> valid_columns(const ConvGeometry& g, Index kx) {
  const Index shift = kx - g.padding;
  Index lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  Index hi = g.width - 1 - shift < 0 ? 0 : (g.width - 1 - shift) / g.stride + 1;
  hi = std::min(hi, g.out_width);
  return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const Index plane = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        T* dst = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        const auto [lo, hi] = valid_columns(g, kx);
        const Index shift = kx - g.padding;
        for (Index oy = 0; oy < g.out_height; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          T* row = dst + oy * g.out_width;
          if (iy < 0 || iy >= g.height) {
            std::fill(row, row + g.out_width, T{0});
            continue;
          }
          const T* src = image + (c * g.height + iy) * g.width + shift;
          std::fill(row, row + lo, T{0});
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, row + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) row[ox] = src[ox * g.stride];
          }
          std::fill(row + hi, row + g.out_width, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  const Index plane = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        const T* src = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        const auto [lo, hi] = valid_columns(g, kx);
        const Index shift = kx - g.padding;
        for (Index oy = 0; oy < g.out_height; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = image + (c * g.height + iy) * g.width + shift;
          const T* row = src + oy * g.out_width;
          if (g.stride == 1) {
            T* __restrict d = dst;
            const T* __restrict r = row;
            for (Index ox = lo; ox < hi; ++ox) d[ox] += r[ox];
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[ox * g.stride] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. input [B,Cin,H,W], weight
/// [Cout,Cin,K,K], bias [Cout].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Index stride = 1, Index padding = 0) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  detail::require_rank(bias.shape(), 1, "conv2d bias");
  const Index batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != k) throw DimensionError("conv2d: kernel must be square");
  if (bias.dim(0) != cout) throw DimensionError("conv2d: bias length must equal output channels");
  if (k % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
  if (stride < 1 || padding < 0) throw ContractError("conv2d: stride >= 1 and padding >= 0 required");
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw DimensionError("conv2d: kernel larger than padded input " + to_string(input.shape()));
  }

  const detail::ConvGeometry g{cin, h, w, k, stride, padding, conv_output_size(h, k, stride, padding),
                               conv_output_size(w, k, stride, padding)};
  const Index in_plane = cin * h * w, out_plane = cout * g.cols();
  Buffer<T> out(static_cast<std::size_t>(batch * out_plane));
  Scratch<T> col(static_cast<std::size_t>(g.rows() * g.cols()));
  ConstMatrixMap<T> wm(weight.data().data(), cout, g.rows());
  ConstMatrixMap<T> cm(col.data(), g.rows(), g.cols());
  for (Index b = 0; b < batch; ++b) {
    detail::im2col(input.data().data() + b * in_plane, g, col.data());
    MatrixMap<T> om(out.data() + b * out_plane, cout, g.cols());
    om.noalias() = wm * cm;
    for (Index o = 0; o < cout; ++o) om.row(o).array() += bias.data()[o];
  }

  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias.impl();
  return detail::make_result<T>(
      Shape{batch, cout, g.out_height, g.out_width}, std::move(out), "conv2d", {&input, &weight, &bias},
      [xi, wi, bi, g, batch, cout, in_plane, out_plane](const TensorImpl<T>& out) {
        Scratch<T> col(wi->requires_grad ? static_cast<std::size_t>(g.rows() * g.cols()) : 0);
        Scratch<T> dcol(xi->requires_grad ? static_cast<std::size_t>(g.rows() * g.cols()) : 0);
        ConstMatrixMap<T> wm(wi->data.data(), cout, g.rows());
        ConstMatrixMap<T> cm(col.data(), g.rows(), g.cols());
        for (Index b = 0; b < batch; ++b) {
          ConstMatrixMap<T> gm(out.grad.data() + b * out_plane, cout, g.cols());
          if (wi->requires_grad) {
            detail::im2col(xi->data.data() + b * in_plane, g, col.data());
            MatrixMap<T> dw(wi->ensure_grad().data(), cout, g.rows());
            dw.noalias() += gm * cm.transpose();
          }
          if (bi->requires_grad) {
            auto& db = bi->ensure_grad();
            for (Index o = 0; o < cout; ++o) db[o] += gm.row(o).sum();
          }
          if (xi->requires_grad) {
            MatrixMap<T> dc(dcol.data(), g.rows(), g.cols());
            dc.noalias() = wm.transpose() * gm;
            detail::col2im_add(dcol.data(), g, xi->ensure_grad().data() + b * in_plane);
          }
        }
      });
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Ties resolve to the first element in row-major order.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, Index window = 2) {
  detail::require_rank(input.shape(), 4, "maxpool2d input");
  const Index batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window < 1) throw ContractError("maxpool2d: window must be positive");
  if (window > h || window > w) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                         to_string(input.shape()));
  }
  const Index oh = h / window, ow = w / window;
  Buffer<T> out(static_cast<std::size_t>(batch * ch * oh * ow));
  std::vector<Index> argmax(out.size());
  const auto& x = input.data();
  for (Index p = 0; p < batch * ch; ++p) {
    const Index in_base = p * h * w;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Index best = in_base + (oy * window) * w + ox * window;
        for (Index dy = 0; dy < window; ++dy) {
          for (Index dx = 0; dx < window; ++dx) {
            const Index idx = in_base + (oy * window + dy) * w + ox * window + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const Index o = (p * oh + oy) * ow + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  auto xi = input.impl();
  return detail::make_result<T>(Shape{batch, ch, oh, ow}, std::move(out), "maxpool2d", {&input},
                                [xi, argmax = std::move(argmax)](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  for (std::size_t o = 0; o < argmax.size(); ++o) {
                                    dx[argmax[o]] += out.grad[o];
                                  }
                                });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& input) {
  detail::require_rank(input.shape(), 4, "upsample_nearest2x input");
  const Index batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index oh = 2 * h, ow = 2 * w;
  Buffer<T> out(static_cast<std::size_t>(batch * ch * oh * ow));
  const auto& x = input.data();
  for (Index p = 0; p < batch * ch; ++p) {
    for (Index oy = 0; oy < oh; ++oy) {
      const T* src = x.data() + (p * h + oy / 2) * w;
      T* dst = out.data() + (p * oh + oy) * ow;
      for (Index ox = 0; ox < ow; ++ox) dst[ox] = src[ox / 2];
    }
  }
  auto xi = input.impl();
  return detail::make_result<T>(Shape{batch, ch, oh, ow}, std::move(out), "upsample_nearest2x",
                                {&input}, [xi, batch, ch, h, w](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  const Index oh = 2 * h, ow = 2 * w;
                                  for (Index p = 0; p < batch * ch; ++p) {
                                    for (Index oy = 0; oy < oh; ++oy) {
                                      const T* g = out.grad.data() + (p * oh + oy) * ow;
                                      T* dst = dx.data() + (p * h + oy / 2) * w;
                                      for (Index ox = 0; ox < ow; ++ox) dst[ox / 2] += g[ox];
                                    }
                                  }
                                });
}

/// Channel-axis concatenation of two [B,C,H,W] tensors.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a.shape(), 4, "concat_channels");
  detail::require_rank(b.shape(), 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const Index batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Buffer<T> out(static_cast<std::size_t>(batch * (ca + cb) * plane));
  for (Index n = 0; n < batch; ++n) {
    auto dst = out.begin() + n * (ca + cb) * plane;
    auto sa = a.data().begin() + n * ca * plane;
    auto sb = b.data().begin() + n * cb * plane;
    std::copy(sa, sa + ca * plane, dst);
    std::copy(sb, sb + cb * plane, dst + ca * plane);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(
      Shape{batch, ca + cb, a.dim(2), a.dim(3)}, std::move(out), "concat_channels", {&a, &b},
      [ai, bi, batch, ca, cb, plane](const TensorImpl<T>& out) {
        for (Index n = 0; n < batch; ++n) {
          const T* g = out.grad.data() + n * (ca + cb) * plane;
          if (ai->requires_grad) {
            T* da = ai->ensure_grad().data() + n * ca * plane;
            for (Index i = 0; i < ca * plane; ++i) da[i] += g[i];
          }
          if (bi->requires_grad) {
            T* db = bi->ensure_grad().data() + n * cb * plane;
            for (Index i = 0; i < cb * plane; ++i) db[i] += g[ca * plane + i];
          }
        }
      });
}

/// Channels [start, start + count) of a [B,C,H,W] tensor.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, Index start, Index count) {
  detail::require_rank(input.shape(), 4, "slice_channels");
  const Index batch = input.dim(0), ch = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (start < 0 || count < 1 || start + count > ch) {
    throw DimensionError("slice_channels: range out of bounds for " + to_string(input.shape()));
  }
  Buffer<T> out(static_cast<std::size_t>(batch * count * plane));
  for (Index n = 0; n < batch; ++n) {
    auto src = input.data().begin() + (n * ch + start) * plane;
    std::copy(src, src + count * plane, out.begin() + n * count * plane);
  }
  auto xi = input.impl();
  return detail::make_result<T>(Shape{batch, count, input.dim(2), input.dim(3)}, std::move(out),
                                "slice_channels", {&input},
                                [xi, batch, ch, start, count, plane](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  for (Index n = 0; n < batch; ++n) {
                                    const T* g = out.grad.data() + n * count * plane;
                                    T* dst = dx.data() + (n * ch + start) * plane;
                                    for (Index i = 0; i < count * plane; ++i) dst[i] += g[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& input, Shape shape) {
  if (numel(shape) != input.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(input.shape()) + " as " + to_string(shape));
  }
  auto xi = input.impl();
  return detail::make_result<T>(std::move(shape), Buffer<T>(input.data().begin(), input.data().end()),
                                "reshape", {&input}, [xi](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += out.grad[i];
                                });
}

/// [B, ...] -> [B, prod(...)]
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& input) {
  return reshape(input, Shape{input.dim(0), input.numel() / input.dim(0)});
}

/// input [B,N], weight [M,N], bias [M] -> input * weight^T + bias.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  detail::require_rank(input.shape(), 2, "linear input");
  detail::require_rank(weight.shape(), 2, "linear weight");
  detail::require_rank(bias.shape(), 1, "linear bias");
  const Index batch = input.dim(0), n = input.dim(1), m = weight.dim(0);
  if (weight.dim(1) != n || bias.dim(0) != m) {
    throw DimensionError("linear: input " + to_string(input.shape()) + " incompatible with weight " +
                         to_string(weight.shape()) + " / bias " + to_string(bias.shape()));
  }
  Buffer<T> out(static_cast<std::size_t>(batch * m));
  ConstMatrixMap<T> xm(input.data().data(), batch, n);
  ConstMatrixMap<T> wm(weight.data().data(), m, n);
  MatrixMap<T> om(out.data(), batch, m);
  om.noalias() = xm * wm.transpose();
  for (Index r = 0; r < batch; ++r) {
    for (Index c = 0; c < m; ++c) om(r, c) += bias.data()[c];
  }
  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias.impl();
  return detail::make_result<T>(Shape{batch, m}, std::move(out), "linear", {&input, &weight, &bias},
                                [xi, wi, bi, batch, n, m](const TensorImpl<T>& out) {
                                  ConstMatrixMap<T> gm(out.grad.data(), batch, m);
                                  if (xi->requires_grad) {
                                    MatrixMap<T> dx(xi->ensure_grad().data(), batch, n);
                                    dx.noalias() += gm * ConstMatrixMap<T>(wi->data.data(), m, n);
                                  }
                                  if (wi->requires_grad) {
                                    MatrixMap<T> dw(wi->ensure_grad().data(), m, n);
                                    dw.noalias() += gm.transpose() * ConstMatrixMap<T>(xi->data.data(), batch, n);
                                  }
                                  if (bi->requires_grad) {
                                    auto& db = bi->ensure_grad();
                                    for (Index c = 0; c < m; ++c) db[c] += gm.col(c).sum();
                                  }
                                });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  Buffer<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v > T{0} ? v : T{0};
  auto xi = input.impl();
  return detail::make_result<T>(input.shape(), std::move(out), "relu", {&input},
                                [xi](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  for (std::size_t i = 0; i < dx.size(); ++i) {
                                    if (xi->data[i] > T{0}) dx[i] += out.grad[i];
                                  }
                                });
}

/// Logistic sigmoid. Outputs are kept strictly inside (0,1) even where the
/// exact value rounds to an endpoint.
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
  Buffer<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) {
    const T s = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
    v = std::clamp(s, lo, hi);
  }
  auto xi = input.impl();
  return detail::make_result<T>(input.shape(), std::move(out), "sigmoid", {&input},
                                [xi](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  for (std::size_t i = 0; i < dx.size(); ++i) {
                                    const T s = out.data[i];
                                    dx[i] += out.grad[i] * s * (T{1} - s);
                                  }
                                });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b},
                                [ai, bi](const TensorImpl<T>& out) {
                                  for (auto* in : {ai.get(), bi.get()}) {
                                    if (!in->requires_grad) continue;
                                    auto& d = in->ensure_grad();
                                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += out.grad[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b},
                                [ai, bi](const TensorImpl<T>& out) {
                                  if (ai->requires_grad) {
                                    auto& d = ai->ensure_grad();
                                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += out.grad[i] * bi->data[i];
                                  }
                                  if (bi->requires_grad) {
                                    auto& d = bi->ensure_grad();
                                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += out.grad[i] * ai->data[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& input, T factor) {
  Buffer<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v *= factor;
  auto xi = input.impl();
  return detail::make_result<T>(input.shape(), std::move(out), "scale", {&input},
                                [xi, factor](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += out.grad[i] * factor;
                                });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
  double total = 0.0;
  for (T v : input.data()) total += v;
  auto xi = input.impl();
  return detail::make_result<T>(Shape{1}, Buffer<T>{static_cast<T>(total)}, "sum", {&input},
                                [xi](const TensorImpl<T>& out) {
                                  auto& dx = xi->ensure_grad();
                                  for (auto& d : dx) d += out.grad[0];
                                });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& input) {
  return scale(sum(input), static_cast<T>(1.0 / static_cast<double>(input.numel())));
}

// ---------------------------------------------------------------------------
// Losses. All reduce to a [1] tensor by averaging over every element.

inline constexpr double kBceEpsilon = 1e-7;

/// Binary cross-entropy between probabilities and {0,1} targets. Predictions
/// are clamped to [eps, 1 - eps]; the gradient is evaluated at the clamped
/// value so saturated pixels keep a learning signal.
template <typename T>
BasicTensor<T> bce_loss(const BasicTensor<T>& prediction, const BasicTensor<T>& target) {
  detail::require_same_shape(prediction, target, "bce_loss");
  const double n = static_cast<double>(prediction.numel());
  double total = 0.0;
  for (Index i = 0; i < prediction.numel(); ++i) {
    const double x = std::clamp<double>(prediction.data()[i], kBceEpsilon, 1.0 - kBceEpsilon);
    const double y = target.data()[i];
    total += y * std::log(x) + (1.0 - y) * std::log(1.0 - x);
  }
  auto pi = prediction.impl();
  auto ti = target.impl();
  return detail::make_result<T>(
      Shape{1}, Buffer<T>{static_cast<T>(-total / n)}, "bce_loss", {&prediction, &target},
      [pi, ti, n](const TensorImpl<T>& out) {
        const double g = out.grad[0] / n;
        if (pi->requires_grad) {
          auto& dp = pi->ensure_grad();
          for (std::size_t i = 0; i < dp.size(); ++i) {
            const double x = std::clamp<double>(pi->data[i], kBceEpsilon, 1.0 - kBceEpsilon);
            const double y = ti->data[i];
            dp[i] += static_cast<T>(g * (x - y) / (x * (1.0 - x)));
          }
        }
        if (ti->requires_grad) {
          auto& dt = ti->ensure_grad();
          for (std::size_t i = 0; i < dt.size(); ++i) {
            const double x = std::clamp<double>(pi->data[i], kBceEpsilon, 1.0 - kBceEpsilon);
            dt[i] += static_cast<T>(-g * (std::log(x) - std::log(1.0 - x)));
          }
        }
      });
}

/// Mean Smooth-L1 with transition at |d| = 1.
template <typename T>
BasicTensor<T> smooth_l1_loss(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "smooth_l1_loss");
  const double n = static_cast<double>(a.numel());
  double total = 0.0;
  for (Index i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    total += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(Shape{1}, Buffer<T>{static_cast<T>(total / n)}, "smooth_l1_loss",
                                {&a, &b}, [ai, bi, n](const TensorImpl<T>& out) {
                                  const double g = out.grad[0] / n;
                                  for (std::size_t i = 0; i < ai->data.size(); ++i) {
                                    const double d = static_cast<double>(ai->data[i]) - bi->data[i];
                                    const double s = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
                                    if (ai->requires_grad) ai->ensure_grad()[i] += static_cast<T>(g * s);
                                    if (bi->requires_grad) bi->ensure_grad()[i] -= static_cast<T>(g * s);
                                  }
                                });
}

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mse_loss");
  const double n = static_cast<double>(a.numel());
  double total = 0.0;
  for (Index i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    total += d * d;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(Shape{1}, Buffer<T>{static_cast<T>(total / n)}, "mse_loss", {&a, &b},
                                [ai, bi, n](const TensorImpl<T>& out) {
                                  const double g = 2.0 * out.grad[0] / n;
                                  for (std::size_t i = 0; i < ai->data.size(); ++i) {
                                    const double d = static_cast<double>(ai->data[i]) - bi->data[i];
                                    if (ai->requires_grad) ai->ensure_grad()[i] += static_cast<T>(g * d);
                                    if (bi->requires_grad) bi->ensure_grad()[i] -= static_cast<T>(g * d);
                                  }
                                });
}

}  // namespace regnet
