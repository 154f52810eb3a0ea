#pragma once

#include <map>

#include <odlc/lossnet.hpp>
#include <odlc/rng.hpp>
#include <odlc/tensor.hpp>

namespace odlc::testing {

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Direct nested-loop cross-correlation with zero "same" padding, TF-style
/// split (extra row/column at the bottom/right).
inline Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k,
                                  const Tensor<double>& b, int stride, bool same) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = k.dim(0), K = k.dim(2);
  int Ho, Wo, pt = 0, pl = 0;
  if (same) {
    Ho = (H + stride - 1) / stride;
    Wo = (W + stride - 1) / stride;
    pt = std::max((Ho - 1) * stride + K - H, 0) / 2;
    pl = std::max((Wo - 1) * stride + K - W, 0) / 2;
  } else {
    Ho = (H - K) / stride + 1;
    Wo = (W - K) / stride + 1;
  }
  Tensor<double> y({O, Ho, Wo});
  for (int o = 0; o < O; ++o)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double s = b.empty() ? 0.0 : b[o];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
              const int iy = oy * stride - pt + ky, ix = ox * stride - pl + kx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              s += x.at(c, iy, ix) * k[((static_cast<size_t>(o) * C + c) * K + ky) * K + kx];
            }
        y.at(o, oy, ox) = s;
      }
  return y;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Direct per-pixel MS-SSIM on plain 2-D arrays, written from the defining
// formula with no shared code.
struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  double operator()(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

struct OracleTerms {
  double cs = 0, ssim = 0;
};

inline OracleTerms oracle_ssim(const Plane& a, const Plane& b, double c1, double c2) {
  const int k = 11, r = 5;
  std::vector<double> g(k);
  double gs = 0;
  for (int i = 0; i < k; ++i) g[i] = std::exp(-0.5 * (i - r) * (i - r) / (1.5 * 1.5));
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) gs += g[i] * g[j];
  const int ho = a.h - k + 1, wo = a.w - k + 1;
  double cs_sum = 0, ssim_sum = 0;
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double wgt = g[i] * g[j] / gs;
          const double p = a(y + i, x + j), q = b(y + i, x + j);
          ma += wgt * p;
          mb += wgt * q;
          saa += wgt * p * p;
          sbb += wgt * q * q;
          sab += wgt * p * q;
        }
      saa -= ma * ma;
      sbb -= mb * mb;
      sab -= ma * mb;
      const double l = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
      const double cs = (2 * sab + c2) / (saa + sbb + c2);
      cs_sum += cs;
      ssim_sum += l * cs;
    }
  const double n = static_cast<double>(ho) * wo;
  return {cs_sum / n, ssim_sum / n};
}

inline Plane halve(const Plane& p) {
  Plane o{p.h / 2, p.w / 2, {}};
  o.v.resize(static_cast<size_t>(o.h) * o.w);
  for (int y = 0; y < o.h; ++y)
    for (int x = 0; x < o.w; ++x)
      o.v[static_cast<size_t>(y) * o.w + x] =
          (p(2 * y, 2 * x) + p(2 * y, 2 * x + 1) + p(2 * y + 1, 2 * x) + p(2 * y + 1, 2 * x + 1)) / 4;
  return o;
}

inline double oracle_ms_ssim(Plane a, Plane b, const std::vector<double>& weights) {
  const double c1 = 1e-4, c2 = 9e-4;
  double out = 1;
  for (size_t j = 0; j < weights.size(); ++j) {
    const auto t = oracle_ssim(a, b, c1, c2);
    out *= std::pow(j + 1 == weights.size() ? t.ssim : t.cs, weights[j]);
    a = halve(a);
    b = halve(b);
  }
  return out;
}

inline Plane plane_of(const Tensor<double>& t) {
  Plane p{t.dim(1), t.dim(2), {}};
  p.v.assign(t.data().begin(), t.data().end());
  return p;
}

// y = clamp(x + noise) keeps the pair correlated, the regime where the score is informative.
inline std::pair<Tensor<double>, Tensor<double>> correlated_pair(int h, int w, double noise, Rng& rng) {
  Tensor<double> x({1, h, w}), y({1, h, w});
  for (size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.uniform(0.0, 1.0);
    y[i] = std::clamp(x[i] + noise * rng.normal(), 0.0, 1.0);
  }
  return {x, y};
}

/// Post-activation taps of a plain conv stack evaluated with conv_oracle:
/// each block's first conv has stride 2 except in block 1.
inline std::map<std::string, Tensor<double>> feature_taps_oracle(const Tensor<double>& img,
                                                                 const ClassifierParams<double>& p) {
  const int h = img.dim(1), w = img.dim(2);
  Tensor<double> a = img;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h * w; ++i) a[c * h * w + i] = (a[c * h * w + i] - p.arch.norm.mean[c]) / p.arch.norm.stddev[c];
  std::map<std::string, Tensor<double>> out;
  for (int b = 1; b <= static_cast<int>(p.arch.widths.size()); ++b)
    for (int k = 1; k <= p.arch.convs_per_block; ++k) {
      const std::string id = std::to_string(b) + "." + std::to_string(k);
      const std::string name = "b" + std::to_string(b) + ".c" + std::to_string(k);
      a = conv_oracle(a, p.params.get(name + ".w").value, p.params.get(name + ".b").value, b > 1 && k == 1 ? 2 : 1,
                      true);
      for (auto& v : a.data()) v = std::max(v, 0.0);
      out[id] = a;
    }
  return out;
}

}  // namespace odlc::testing
