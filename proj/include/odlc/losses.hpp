#pragma once

// Observer-dependent distortions between an original x and a reconstruction y,
// both RGB images in [0,1]:
//   d_H      = 1 - MS-SSIM(luma x, luma y)
//   d_C,I    = sum_{i in I} (H_i W_i C_i)^-1 ||phi_i(x) - phi_i(y)||^2
//   d_alpha  = (1 - alpha) * lambda_H * d_H + alpha * d_C,I
// phi_i are post-activation feature maps of a frozen loss network.

#include "odlc/lossnet.hpp"
#include "odlc/msssim.hpp"

namespace odlc {

struct LossConfig {
  double alpha = 0.0;
  double lambda_h = 5000.0;
  std::vector<std::string> layer_ids{"1.1", "5.1"};
  MsSsimConfig msssim;

  void validate() const {
    require(alpha >= 0.0 && alpha <= 1.0, "loss config: alpha must be in [0,1]");
    require(lambda_h > 0.0, "loss config: lambda_H must be positive");
    require(alpha == 0.0 || !layer_ids.empty(), "loss config: layer set must be non-empty when alpha > 0");
    msssim.validate();
  }
};

/// 1 - MS-SSIM on luma. `cfg` must already fit the image size.
template <class T>
Var<T> human_distortion(Var<T> x, Var<T> y, const MsSsimConfig& cfg) {
  return add_scalar(scale(ms_ssim(luma(x), luma(y), cfg), T(-1)), T(1));
}

/// Feature reconstruction distortion against precomputed reference taps.
/// Loss-network parameters are bound frozen, so no gradient reaches them.
template <class T>
Var<T> feature_distortion(const std::map<std::string, Var<T>>& reference, Var<T> y,
                          const ClassifierParams<T>& lossnet, const std::vector<std::string>& layer_ids) {
  require(!layer_ids.empty(), "feature_distortion: empty layer set");
  Tape<T>& tape = *y.tape;
  auto taps = classifier_forward_frozen(tape, y, lossnet, layer_ids, false).taps;
  Var<T> total;
  for (size_t i = 0; i < layer_ids.size(); ++i) {
    const auto it = reference.find(layer_ids[i]);
    require(it != reference.end(), "feature_distortion: reference missing layer '" + layer_ids[i] + "'");
    // mean over C_i*H_i*W_i entries == gamma_i * squared norm
    Var<T> term = mean(square(sub(it->second, taps.at(layer_ids[i]))));
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

template <class T>
Var<T> feature_distortion(Var<T> x, Var<T> y, const ClassifierParams<T>& lossnet,
                          const std::vector<std::string>& layer_ids) {
  auto ref = classifier_forward_frozen(*x.tape, x, lossnet, layer_ids, false).taps;
  return feature_distortion(ref, y, lossnet, layer_ids);
}

/// Per-reference quantities reused across every reconstruction of the same x.
template <class T>
struct Reference {
  Var<T> rgb;
  std::map<std::string, Var<T>> features;
};

template <class T>
Reference<T> prepare_reference(Var<T> x, const LossConfig& cfg, const ClassifierParams<T>* lossnet) {
  Reference<T> ref{x, {}};
  if (cfg.alpha > 0.0) {
    require(lossnet != nullptr, "observer_distortion: alpha > 0 requires a loss network");
    ref.features = classifier_forward_frozen(*x.tape, x, *lossnet, cfg.layer_ids, false).taps;
  }
  return ref;
}

template <class T>
struct Distortion {
  Var<T> value;                 // d_alpha, tagged "observer_distortion"
  std::optional<double> human;    // d_H when evaluated
  std::optional<double> feature;  // d_C when evaluated
};

/// d_alpha. At alpha = 0 the loss network is never run; at alpha = 1 MS-SSIM
/// is never computed. The MS-SSIM scale count is fitted to the image size.
template <class T>
Distortion<T> observer_distortion(const Reference<T>& ref, Var<T> y, const LossConfig& cfg,
                                  const ClassifierParams<T>* lossnet) {
  cfg.validate();
  Distortion<T> out;
  std::optional<Var<T>> dh, dc;
  if (cfg.alpha < 1.0) {
    const MsSsimConfig fitted = fit_scales(cfg.msssim, y.value().dim(1), y.value().dim(2));
    dh = human_distortion(ref.rgb, y, fitted);
    out.human = dh->value()[0];
  }
  if (cfg.alpha > 0.0) {
    require(lossnet != nullptr, "observer_distortion: alpha > 0 requires a loss network");
    dc = feature_distortion(ref.features, y, *lossnet, cfg.layer_ids);
    out.feature = dc->value()[0];
  }
  Var<T> total;
  if (dh && dc) {
    total = add(scale(*dh, static_cast<T>((1.0 - cfg.alpha) * cfg.lambda_h)), scale(*dc, static_cast<T>(cfg.alpha)));
  } else if (dh) {
    total = scale(*dh, static_cast<T>(cfg.lambda_h));
  } else {
    total = *dc;
  }
  out.value = tagged(total, "observer_distortion");
  return out;
}

template <class T>
Distortion<T> observer_distortion(Var<T> x, Var<T> y, const LossConfig& cfg, const ClassifierParams<T>* lossnet) {
  return observer_distortion(prepare_reference(x, cfg, lossnet), y, cfg, lossnet);
}

}  // namespace odlc
