#pragma once

// Differentiable multi-scale SSIM on single-channel [1,H,W] images.
//
// Per scale j, local statistics come from an 11x11 Gaussian window (sigma 1.5,
// valid convolution):
//   l  = (2 mu_x mu_y + C1) / (mu_x^2 + mu_y^2 + C1)
//   cs = (2 sigma_xy + C2) / (sigma_x^2 + sigma_y^2 + C2)
// with C1 = (K1 L)^2, C2 = (K2 L)^2. Between scales both images are 2x2
// average-pooled. The score is
//   MS-SSIM = prod_{j<M} mean(cs_j)^{w_j} * mean(l_M cs_M)^{w_M}
// where M is the coarsest scale.

#include "odlc/ops.hpp"

namespace odlc {

struct MsSsimConfig {
  int scales = 5;
  // Published five-scale exponents (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
  // rescaled by their sum 1.0001 so they sum to one.
  std::vector<double> weights{0.0448 / 1.0001, 0.2856 / 1.0001, 0.3001 / 1.0001,
                              0.2363 / 1.0001, 0.1333 / 1.0001};
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }

  void validate() const {
    require(scales >= 1, "ms-ssim: scales must be >= 1");
    require(static_cast<int>(weights.size()) == scales,
            "ms-ssim: need one weight per scale (" + std::to_string(scales) + ")");
    double s = 0;
    for (double w : weights) s += w;
    require(std::abs(s - 1.0) <= 1e-6, "ms-ssim: scale weights must sum to 1");
    require(window >= 1 && window % 2 == 1, "ms-ssim: window must be odd");
    require(sigma > 0, "ms-ssim: sigma must be positive");
  }

  /// Smallest side the configured scale count accepts.
  int min_side() const { return window << (scales - 1); }
};

/// Largest scale count (<= cfg.scales) the image supports, with the leading
/// weights renormalized to sum to one.
inline MsSsimConfig fit_scales(MsSsimConfig cfg, int h, int w) {
  const int side = std::min(h, w);
  if (side < cfg.window)
    throw Error("ms-ssim: image side " + std::to_string(side) + " smaller than window " +
                std::to_string(cfg.window));
  while (cfg.scales > 1 && side < cfg.min_side()) --cfg.scales;
  cfg.weights.resize(cfg.scales);
  double s = 0;
  for (double v : cfg.weights) s += v;
  for (double& v : cfg.weights) v /= s;
  return cfg;
}

template <class T>
Tensor<T> gaussian_window(int size, double sigma) {
  Tensor<T> k({1, 1, size, size});
  const int r = size / 2;
  double total = 0;
  std::vector<double> g(size);
  for (int i = 0; i < size; ++i) g[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) total += g[i] * g[j];
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) k[i * size + j] = static_cast<T>(g[i] * g[j] / total);
  return k;
}

template <class T>
struct SsimTerms {
  Var<T> cs;    // mean contrast-structure term
  Var<T> ssim;  // mean full SSIM (luminance x contrast-structure)
};

template <class T>
SsimTerms<T> ssim_scale(Var<T> x, Var<T> y, const MsSsimConfig& cfg) {
  if (x.shape() != y.shape())
    throw Error("ssim: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  if (x.value().rank() != 3 || x.value().dim(0) != 1)
    throw Error("ssim: expected single-channel [1,H,W], got " + shape_str(x.shape()));
  if (std::min(x.value().dim(1), x.value().dim(2)) < cfg.window)
    throw Error("ssim: image " + shape_str(x.shape()) + " smaller than window " +
                std::to_string(cfg.window));
  Tape<T>& tape = *x.tape;
  Var<T> win = tape.constant(gaussian_window<T>(cfg.window, cfg.sigma));
  auto blur = [&](Var<T> v) { return conv2d(v, win, std::nullopt, 1, Padding::valid); };
  const T c1 = static_cast<T>(cfg.c1()), c2 = static_cast<T>(cfg.c2());

  Var<T> mx = blur(x), my = blur(y);
  Var<T> mxx = square(mx), myy = square(my), mxy = mul(mx, my);
  Var<T> sxx = sub(blur(square(x)), mxx);
  Var<T> syy = sub(blur(square(y)), myy);
  Var<T> sxy = sub(blur(mul(x, y)), mxy);

  Var<T> lum = div(add_scalar(scale(mxy, T(2)), c1), add_scalar(add(mxx, myy), c1));
  Var<T> cs = div(add_scalar(scale(sxy, T(2)), c2), add_scalar(add(sxx, syy), c2));
  return {mean(cs), mean(mul(lum, cs))};
}

// Means below this floor are clamped before exponentiation so the product stays
// positive; only reachable for strongly anti-correlated inputs.
inline constexpr double kMsSsimFloor = 1e-6;

template <class T>
Var<T> ms_ssim(Var<T> x, Var<T> y, const MsSsimConfig& cfg) {
  cfg.validate();
  if (x.shape() != y.shape())
    throw Error("ms-ssim: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  const int side = std::min(x.value().dim(1), x.value().dim(2));
  if (side < cfg.min_side())
    throw Error("ms-ssim: image side " + std::to_string(side) + " too small for " +
                std::to_string(cfg.scales) + " scales (need " + std::to_string(cfg.min_side()) +
                "); reduce the scale count");
  Var<T> result;
  for (int j = 0; j < cfg.scales; ++j) {
    const bool last = j == cfg.scales - 1;
    SsimTerms<T> terms = ssim_scale(x, y, cfg);
    Var<T> factor = pow_floor(last ? terms.ssim : terms.cs, static_cast<T>(cfg.weights[j]),
                              static_cast<T>(kMsSsimFloor));
    result = j == 0 ? factor : mul(result, factor);
    if (!last) {
      x = avg_pool2(x);
      y = avg_pool2(y);
    }
  }
  return result;
}

/// BT.601 luma of a [3,H,W] image.
template <class T>
Var<T> luma(Var<T> rgb) {
  return channel_mix(rgb, std::vector<T>{T(0.299), T(0.587), T(0.114)});
}

/// MS-SSIM of two RGB [0,1] images on luma, with the scale count reduced to fit.
inline double ms_ssim_rgb(const Image& a, const Image& b, const MsSsimConfig& cfg = {}) {
  Tape<float> tape(false);
  const MsSsimConfig fitted = fit_scales(cfg, a.dim(1), a.dim(2));
  return ms_ssim(luma(tape.constant(a)), luma(tape.constant(b)), fitted).value()[0];
}

}  // namespace odlc
