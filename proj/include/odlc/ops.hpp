#pragma once

// Differentiable operations recorded on a Tape. All ops are broadcast-free:
// binary elementwise ops require identical shapes. Spatial ops work on
// rank-3 [C,H,W] tensors.

#include <array>
#include <optional>
#include <type_traits>

#include "odlc/autodiff.hpp"

namespace odlc {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void require_rank3(const Tensor<T>& t, const char* op) {
  if (t.rank() != 3) throw Error(std::string(op) + ": expected [C,H,W], got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// y = f(x); df(x, y) gives dy/dx.
template <class T, class F, class DF>
Var<T> map_unary(std::string_view op, Var<T> a, F f, DF df) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape->record(
      op, std::move(y),
      [a, df](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
        Tensor<T>* ga = t.grad_slot(a);
        if (!ga) return;
        const Tensor<T>& x = t.value(a);
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * df(x[i], y[i]);
      },
      a);
}

template <class T>
Var<T> tanh(Var<T> a) {
  return map_unary<T>("tanh", a, [](T x) { return std::tanh(x); },
                      [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return map_unary<T>(
      "sigmoid", a,
      [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> relu(Var<T> a) {
  return map_unary<T>("relu", a, [](T x) { return x > 0 ? x : T(0); },
                      [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <class T>
Var<T> square(Var<T> a) {
  return map_unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return map_unary<T>("scale", a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  return map_unary<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

/// max(x, floor)^p; zero gradient below the floor.
template <class T>
Var<T> pow_floor(Var<T> a, T p, T floor) {
  return map_unary<T>(
      "pow", a, [p, floor](T x) { return std::pow(std::max(x, floor), p); },
      [p, floor](T x, T) { return x > floor ? p * std::pow(x, p - T(1)) : T(0); });
}

namespace detail {
template <class T, class F, class DA, class DB>
Var<T> binary(std::string_view op, Var<T> a, Var<T> b, F f, DA da, DB db) {
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  if (x.shape() != y.shape())
    throw Error(std::string(op) + ": shape mismatch " + shape_str(x.shape()) + " vs " +
                shape_str(y.shape()));
  Tensor<T> z(x.shape());
  for (size_t i = 0; i < x.size(); ++i) z[i] = f(x[i], y[i]);
  return a.tape->record(
      op, std::move(z),
      [a, b, da, db](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        const Tensor<T>& x = t.value(a);
        const Tensor<T>& y = t.value(b);
        if (Tensor<T>* ga = t.grad_slot(a))
          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * da(x[i], y[i]);
        if (Tensor<T>* gb = t.grad_slot(b))
          for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * db(x[i], y[i]);
      },
      a, b);
}
}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                           [](T, T) { return T(1); });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                           [](T, T) { return T(-1); });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                           [](T x, T) { return x; });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

/// Sum of all entries, shape [1].
template <class T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& x = a.value();
  T s = 0;
  for (T v : x.data()) s += v;
  return a.tape->record(
      "sum", Tensor<T>({1}, std::vector<T>{s}),
      [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        if (Tensor<T>* ga = t.grad_slot(a))
          for (auto& v : ga->data()) v += g[0];
      },
      a);
}

/// Mean of all entries, shape [1].
template <class T>
Var<T> mean(Var<T> a) {
  const Tensor<T>& x = a.value();
  T s = 0;
  for (T v : x.data()) s += v;
  const T n = static_cast<T>(x.size());
  return a.tape->record(
      "mean", Tensor<T>({1}, std::vector<T>{s / n}),
      [a, n](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        if (Tensor<T>* ga = t.grad_slot(a))
          for (auto& v : ga->data()) v += g[0] / n;
      },
      a);
}

/// Σ w ⊙ a against a constant weight tensor, shape [1].
template <class T>
Var<T> weighted_sum(Var<T> a, const Tensor<T>& w) {
  require_same_shape(a.value(), w, "weighted_sum");
  T s = 0;
  for (size_t i = 0; i < w.size(); ++i) s += w[i] * a.value()[i];
  return a.tape->record(
      "weighted_sum", Tensor<T>({1}, std::vector<T>{s}),
      [a, w](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        if (Tensor<T>* ga = t.grad_slot(a))
          for (size_t i = 0; i < w.size(); ++i) (*ga)[i] += g[0] * w[i];
      },
      a);
}

/// Forward value supplied by the caller, gradient passed through unchanged
/// (straight-through estimator).
template <class T>
Var<T> straight_through(Var<T> a, Tensor<T> forward_value) {
  require_same_shape(a.value(), forward_value, "straight_through");
  return a.tape->record(
      "straight_through", std::move(forward_value),
      [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        if (Tensor<T>* ga = t.grad_slot(a))
          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      },
      a);
}

/// Identity recorded under `op`, used to mark graph positions for inspection.
template <class T>
Var<T> tagged(Var<T> a, std::string_view op) {
  return a.tape->record(
      op, a.value(),
      [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        if (Tensor<T>* ga = t.grad_slot(a))
          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      },
      a);
}

// ---------------------------------------------------------------------------
// Channel-wise helpers (constant coefficients)

/// y[c] = x[c] * scale[c] + shift[c]
template <class T>
Var<T> channel_affine(Var<T> a, std::vector<T> scale, std::vector<T> shift) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "channel_affine");
  const int C = x.dim(0);
  if (static_cast<int>(scale.size()) != C || static_cast<int>(shift.size()) != C)
    throw Error("channel_affine: coefficient count does not match channel dim 0 = " +
                std::to_string(C));
  const size_t plane = x.size() / C;
  Tensor<T> y(x.shape());
  for (int c = 0; c < C; ++c)
    for (size_t i = 0; i < plane; ++i) y[c * plane + i] = x[c * plane + i] * scale[c] + shift[c];
  return a.tape->record(
      "channel_affine", std::move(y),
      [a, scale, plane](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* ga = t.grad_slot(a);
        if (!ga) return;
        for (size_t c = 0; c < scale.size(); ++c)
          for (size_t i = 0; i < plane; ++i) (*ga)[c * plane + i] += g[c * plane + i] * scale[c];
      },
      a);
}

/// Weighted sum over channels: [C,H,W] -> [1,H,W].
template <class T>
Var<T> channel_mix(Var<T> a, std::vector<T> weights) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "channel_mix");
  const int C = x.dim(0);
  if (static_cast<int>(weights.size()) != C)
    throw Error("channel_mix: weight count does not match channel dim 0 = " + std::to_string(C));
  const size_t plane = x.size() / C;
  Tensor<T> y({1, x.dim(1), x.dim(2)});
  for (int c = 0; c < C; ++c)
    for (size_t i = 0; i < plane; ++i) y[i] += weights[c] * x[c * plane + i];
  return a.tape->record(
      "channel_mix", std::move(y),
      [a, weights, plane](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* ga = t.grad_slot(a);
        if (!ga) return;
        for (size_t c = 0; c < weights.size(); ++c)
          for (size_t i = 0; i < plane; ++i) (*ga)[c * plane + i] += weights[c] * g[i];
      },
      a);
}

/// Channels [begin, begin+count) of a [C,H,W] tensor.
template <class T>
Var<T> channel_slice(Var<T> a, int begin, int count) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "channel_slice");
  if (begin < 0 || count <= 0 || begin + count > x.dim(0))
    throw Error("channel_slice: range [" + std::to_string(begin) + "," +
                std::to_string(begin + count) + ") outside channel dim 0 = " +
                std::to_string(x.dim(0)));
  const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
  Tensor<T> y({count, x.dim(1), x.dim(2)});
  std::copy_n(x.data().begin() + begin * plane, count * plane, y.data().begin());
  return a.tape->record(
      "channel_slice", std::move(y),
      [a, begin, plane](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* ga = t.grad_slot(a);
        if (!ga) return;
        for (size_t i = 0; i < g.size(); ++i) (*ga)[begin * plane + i] += g[i];
      },
      a);
}

// ---------------------------------------------------------------------------
// Spatial

/// Window [top, top+h) x [left, left+w) of every channel.
template <class T>
Var<T> spatial_crop(Var<T> a, int top, int left, int h, int w) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "spatial_crop");
  if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > x.dim(1) || left + w > x.dim(2))
    throw Error("spatial_crop: window exceeds " + shape_str(x.shape()));
  if (top == 0 && left == 0 && h == x.dim(1) && w == x.dim(2)) return a;
  const int C = x.dim(0);
  Tensor<T> y({C, h, w});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < h; ++i) std::copy_n(&x.at(c, top + i, left), w, &y.at(c, i, 0));
  return a.tape->record(
      "spatial_crop", std::move(y),
      [a, top, left](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* ga = t.grad_slot(a);
        if (!ga) return;
        for (int c = 0; c < g.dim(0); ++c)
          for (int i = 0; i < g.dim(1); ++i)
            for (int j = 0; j < g.dim(2); ++j) ga->at(c, top + i, left + j) += g.at(c, i, j);
      },
      a);
}

enum class Padding { same, valid };

struct ConvGeometry {
  int cin, h, w, cout, k, stride, ho, wo, pad_top, pad_left;
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& kernel, int stride, Padding pad) {
  if (in.size() != 3) throw Error("conv2d: input must be [C,H,W], got " + shape_str(in));
  if (kernel.size() != 4)
    throw Error("conv2d: kernel must be [C_out,C_in,k,k], got " + shape_str(kernel));
  if (stride < 1) throw Error("conv2d: stride must be >= 1");
  if (kernel[1] != in[0])
    throw Error("conv2d: kernel dim 1 (C_in = " + std::to_string(kernel[1]) +
                ") does not match input dim 0 (C = " + std::to_string(in[0]) + ")");
  if (kernel[2] != kernel[3])
    throw Error("conv2d: kernel dims 2 and 3 must be equal, got " + shape_str(kernel));
  if (kernel[2] % 2 == 0)
    throw Error("conv2d: kernel size (dim 2) must be odd, got " + std::to_string(kernel[2]));
  ConvGeometry g{in[0], in[1], in[2], kernel[0], kernel[2], stride, 0, 0, 0, 0};
  if (pad == Padding::same) {
    g.ho = (g.h + stride - 1) / stride;
    g.wo = (g.w + stride - 1) / stride;
    g.pad_top = std::max((g.ho - 1) * stride + g.k - g.h, 0) / 2;
    g.pad_left = std::max((g.wo - 1) * stride + g.k - g.w, 0) / 2;
  } else {
    if (g.h < g.k) throw Error("conv2d: input dim 1 (H) smaller than kernel for valid padding");
    if (g.w < g.k) throw Error("conv2d: input dim 2 (W) smaller than kernel for valid padding");
    g.ho = (g.h - g.k) / stride + 1;
    g.wo = (g.w - g.k) / stride + 1;
  }
  return g;
}

namespace detail {

inline bool is_pointwise(const ConvGeometry& g) {
  return g.k == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0;
}

template <class T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const int P = g.ho * g.wo;
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + (static_cast<size_t>(c * g.k + ky) * g.k + kx) * P;
        const T* plane = in + static_cast<size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ky;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad_left + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* in) {
  const int P = g.ho * g.wo;
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + (static_cast<size_t>(c * g.k + ky) * g.k + kx) * P;
        T* plane = in + static_cast<size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + static_cast<size_t>(iy) * g.w;
          const T* src = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad_left + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation (no kernel flip) of [C_in,H,W] with [C_out,C_in,k,k],
/// plus optional bias [C_out]. Same-padding pads with zeros and yields
/// ceil(H/stride) rows.
template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::optional<std::type_identity_t<Var<T>>> bias,
              int stride = 1,
              Padding padding = Padding::same) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = kernel.value();
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, padding);
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != g.cout))
    throw Error("conv2d: bias must be [C_out = " + std::to_string(g.cout) + "], got " +
                shape_str(bias->value().shape()));
  const int P = g.ho * g.wo;
  const int K = g.cin * g.k * g.k;

  Tensor<T> y({g.cout, g.ho, g.wo});
  {
    AlignedVector<T> col;
    const T* colp = x.data().data();
    if (!detail::is_pointwise(g)) {
      col.resize(static_cast<size_t>(K) * P);
      detail::im2col(x.data().data(), g, col.data());
      colp = col.data();
    }
    detail::ConstMatMap<T> W(w.data().data(), g.cout, K);
    detail::ConstMatMap<T> X(colp, K, P);
    detail::MatMap<T> Y(y.data().data(), g.cout, P);
    Y.noalias() = W * X;
    if (bias) {
      const Tensor<T>& b = bias->value();
      for (int o = 0; o < g.cout; ++o) Y.row(o).array() += b[o];
    }
  }

  auto bw = [input, kernel, bias, g, P, K](Tape<T>& t, const Tensor<T>& gy, const Tensor<T>&) {
    const Tensor<T>& x = t.value(input);
    const Tensor<T>& w = t.value(kernel);
    detail::ConstMatMap<T> G(gy.data().data(), g.cout, P);
    Tensor<T>* gx = t.grad_slot(input);
    Tensor<T>* gw = t.grad_slot(kernel);
    if (bias)
      if (Tensor<T>* gb = t.grad_slot(*bias))
        for (int o = 0; o < g.cout; ++o) (*gb)[o] += G.row(o).sum();
    const bool pointwise = detail::is_pointwise(g);
    if (gw) {
      AlignedVector<T> col;
      const T* colp = x.data().data();
      if (!pointwise) {
        col.resize(static_cast<size_t>(K) * P);
        detail::im2col(x.data().data(), g, col.data());
        colp = col.data();
      }
      detail::ConstMatMap<T> X(colp, K, P);
      detail::MatMap<T> GW(gw->data().data(), g.cout, K);
      GW.noalias() += G * X.transpose();
    }
    if (gx) {
      detail::ConstMatMap<T> W(w.data().data(), g.cout, K);
      if (pointwise) {
        detail::MatMap<T> GX(gx->data().data(), K, P);
        GX.noalias() += W.transpose() * G;
      } else {
        detail::RowMat<T> gcol = W.transpose() * G;
        detail::col2im_add(gcol.data(), g, gx->data().data());
      }
    }
  };
  if (bias) return input.tape->record("conv2d", std::move(y), bw, input, kernel, *bias);
  return input.tape->record("conv2d", std::move(y), bw, input, kernel);
}

/// Pixel shuffle: out[c, y*r+i, x*r+j] = in[c*r*r + i*r + j, y, x].
template <class T>
Var<T> depth_to_space(Var<T> a, int r) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "depth_to_space");
  if (r < 1) throw Error("depth_to_space: factor must be positive");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (C % (r * r) != 0)
    throw Error("depth_to_space: channel dim 0 = " + std::to_string(C) +
                " not divisible by r^2 = " + std::to_string(r * r));
  const int Co = C / (r * r);
  Tensor<T> y({Co, H * r, W * r});
  std::vector<uint32_t> src(y.size());
  for (int c = 0; c < Co; ++c)
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j)
        for (int yy = 0; yy < H; ++yy)
          for (int xx = 0; xx < W; ++xx) {
            const size_t o = (static_cast<size_t>(c) * H * r + yy * r + i) * W * r + xx * r + j;
            const size_t s = (static_cast<size_t>(c * r * r + i * r + j) * H + yy) * W + xx;
            y[o] = x[s];
            src[o] = static_cast<uint32_t>(s);
          }
  return a.tape->record(
      "depth_to_space", std::move(y),
      [a, src = std::move(src)](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        if (Tensor<T>* ga = t.grad_slot(a))
          for (size_t o = 0; o < g.size(); ++o) (*ga)[src[o]] += g[o];
      },
      a);
}

/// Inverse of depth_to_space.
template <class T>
Var<T> space_to_depth(Var<T> a, int r) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "space_to_depth");
  if (r < 1) throw Error("space_to_depth: factor must be positive");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % r != 0 || W % r != 0)
    throw Error("space_to_depth: spatial dims " + shape_str(x.shape()) + " not divisible by " +
                std::to_string(r));
  const int Ho = H / r, Wo = W / r;
  Tensor<T> y({C * r * r, Ho, Wo});
  std::vector<uint32_t> src(y.size());
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j)
        for (int yy = 0; yy < Ho; ++yy)
          for (int xx = 0; xx < Wo; ++xx) {
            const size_t o = (static_cast<size_t>(c * r * r + i * r + j) * Ho + yy) * Wo + xx;
            const size_t s = (static_cast<size_t>(c) * H + yy * r + i) * W + xx * r + j;
            y[o] = x[s];
            src[o] = static_cast<uint32_t>(s);
          }
  return a.tape->record(
      "space_to_depth", std::move(y),
      [a, src = std::move(src)](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        if (Tensor<T>* ga = t.grad_slot(a))
          for (size_t o = 0; o < g.size(); ++o) (*ga)[src[o]] += g[o];
      },
      a);
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
template <class T>
Var<T> avg_pool2(Var<T> a) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "avg_pool2");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = H / 2, Wo = W / 2;
  if (Ho < 1 || Wo < 1) throw Error("avg_pool2: input " + shape_str(x.shape()) + " too small");
  Tensor<T> y({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j)
        y.at(c, i, j) = T(0.25) * (x.at(c, 2 * i, 2 * j) + x.at(c, 2 * i, 2 * j + 1) +
                                   x.at(c, 2 * i + 1, 2 * j) + x.at(c, 2 * i + 1, 2 * j + 1));
  return a.tape->record(
      "avg_pool2", std::move(y),
      [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* ga = t.grad_slot(a);
        if (!ga) return;
        for (int c = 0; c < g.dim(0); ++c)
          for (int i = 0; i < g.dim(1); ++i)
            for (int j = 0; j < g.dim(2); ++j) {
              const T v = T(0.25) * g.at(c, i, j);
              ga->at(c, 2 * i, 2 * j) += v;
              ga->at(c, 2 * i, 2 * j + 1) += v;
              ga->at(c, 2 * i + 1, 2 * j) += v;
              ga->at(c, 2 * i + 1, 2 * j + 1) += v;
            }
      },
      a);
}

/// [C,H,W] -> [C], spatial mean per channel.
template <class T>
Var<T> global_avg_pool(Var<T> a) {
  const Tensor<T>& x = a.value();
  detail::require_rank3(x, "global_avg_pool");
  const int C = x.dim(0);
  const size_t plane = x.size() / C;
  Tensor<T> y({C});
  for (int c = 0; c < C; ++c) {
    T s = 0;
    for (size_t i = 0; i < plane; ++i) s += x[c * plane + i];
    y[c] = s / static_cast<T>(plane);
  }
  return a.tape->record(
      "global_avg_pool", std::move(y),
      [a, plane](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* ga = t.grad_slot(a);
        if (!ga) return;
        for (size_t c = 0; c < g.size(); ++c)
          for (size_t i = 0; i < plane; ++i) (*ga)[c * plane + i] += g[c] / static_cast<T>(plane);
      },
      a);
}

/// y = W x + b with W [K,C], x [C], b [K].
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& w = weight.value();
  const Tensor<T>& b = bias.value();
  if (xv.rank() != 1) throw Error("linear: input must be rank 1, got " + shape_str(xv.shape()));
  if (w.rank() != 2 || w.dim(1) != xv.dim(0))
    throw Error("linear: weight dim 1 must equal input dim 0 = " + std::to_string(xv.dim(0)) +
                ", got " + shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != w.dim(0))
    throw Error("linear: bias must be [" + std::to_string(w.dim(0)) + "]");
  const int K = w.dim(0), C = w.dim(1);
  Tensor<T> y({K});
  for (int k = 0; k < K; ++k) {
    T s = b[k];
    for (int c = 0; c < C; ++c) s += w[k * C + c] * xv[c];
    y[k] = s;
  }
  return x.tape->record(
      "linear", std::move(y),
      [x, weight, bias, K, C](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        const Tensor<T>& xv = t.value(x);
        const Tensor<T>& w = t.value(weight);
        if (Tensor<T>* gb = t.grad_slot(bias))
          for (int k = 0; k < K; ++k) (*gb)[k] += g[k];
        if (Tensor<T>* gw = t.grad_slot(weight))
          for (int k = 0; k < K; ++k)
            for (int c = 0; c < C; ++c) (*gw)[k * C + c] += g[k] * xv[c];
        if (Tensor<T>* gx = t.grad_slot(x))
          for (int k = 0; k < K; ++k)
            for (int c = 0; c < C; ++c) (*gx)[c] += g[k] * w[k * C + c];
      },
      x, weight, bias);
}

/// -log softmax(logits)[label], shape [1].
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, int label) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 1) throw Error("softmax_cross_entropy: logits must be rank 1");
  if (label < 0 || label >= z.dim(0)) throw Error("softmax_cross_entropy: label out of range");
  T m = z[0];
  for (T v : z.data()) m = std::max(m, v);
  std::vector<T> p(z.size());
  T s = 0;
  for (size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (auto& v : p) v /= s;
  const T loss = -(z[label] - m - std::log(s));
  return logits.tape->record(
      "cross_entropy", Tensor<T>({1}, std::vector<T>{loss}),
      [logits, label, p = std::move(p)](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T>* gz = t.grad_slot(logits);
        if (!gz) return;
        for (size_t i = 0; i < p.size(); ++i)
          (*gz)[i] += g[0] * (p[i] - (static_cast<int>(i) == label ? T(1) : T(0)));
      },
      logits);
}

// ---------------------------------------------------------------------------
// Convolutional GRU

/// Weights of one convolutional GRU layer, gate order [update, reset, candidate].
template <class T>
struct GruWeights {
  Var<T> input_kernel;   // [3H, C_in, k, k]
  Var<T> input_bias;     // [3H]
  Var<T> hidden_gates;   // [2H, H, kh, kh] for update and reset
  Var<T> hidden_cand;    // [H, H, kh, kh] applied to r ⊙ h
};

/// h' = (1-u) ⊙ h + u ⊙ c with
///   u = σ(Wu*x + Uu*h + bu), r = σ(Wr*x + Ur*h + br),
///   c = tanh(Wc*x + Uc*(r ⊙ h) + bc).
/// The input convolution runs with `stride`; h lives at the output resolution.
template <class T>
Var<T> conv_gru_cell(Var<T> x, Var<T> h, const GruWeights<T>& w, int stride = 1) {
  const int H = h.value().rank() == 3 ? h.value().dim(0) : -1;
  if (H <= 0) throw Error("conv_gru_cell: hidden state must be [H,h,w]");
  const Shape& wx = w.input_kernel.value().shape();
  if (wx.size() != 4 || wx[0] != 3 * H)
    throw Error("conv_gru_cell: input kernel dim 0 must be 3*H = " + std::to_string(3 * H));
  Var<T> gx = conv2d(x, w.input_kernel, std::optional<Var<T>>(w.input_bias), stride);
  if (gx.value().dim(1) != h.value().dim(1) || gx.value().dim(2) != h.value().dim(2))
    throw Error("conv_gru_cell: spatial misalignment, input maps to " + shape_str(gx.value().shape()) +
                " but hidden is " + shape_str(h.value().shape()));
  Var<T> gh = conv2d(h, w.hidden_gates, std::optional<Var<T>>{}, 1);
  Var<T> u = sigmoid(add(channel_slice(gx, 0, H), channel_slice(gh, 0, H)));
  Var<T> r = sigmoid(add(channel_slice(gx, H, H), channel_slice(gh, H, H)));
  Var<T> hc = conv2d(mul(r, h), w.hidden_cand, std::optional<Var<T>>{}, 1);
  Var<T> c = tanh(add(channel_slice(gx, 2 * H, H), hc));
  return add(h, mul(u, sub(c, h)));
}

}  // namespace odlc
