#pragma once

// Central finite-difference verification of Tape gradients.
//
// Everything being differentiated lives in a ParameterSet. The scalar probe is
// L = Σ w ⊙ f(params) with fixed random weights w, so every output entry
// contributes. For each parameter tensor we compare analytic and numeric
// derivatives on up to `max_entries` coordinates plus one random direction
// covering all coordinates. Errors are normwise relative:
//   entries:   max_j |a_j - n_j| / max(max_j |a_j|, max_j |n_j|)
//   direction: |a·v - n_v| / Σ_j |a_j v_j|

#include <functional>

#include "odlc/ops.hpp"
#include "odlc/rng.hpp"

namespace odlc {

struct GradCheckEntry {
  std::string name;
  double entry_error = 0;
  double direction_error = 0;
  size_t coordinates = 0;
  double error() const { return std::max(entry_error, direction_error); }
};

struct GradCheckReport {
  std::string label;
  std::vector<GradCheckEntry> entries;
  double max_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.error());
    return m;
  }
  bool passed(double tol) const { return !entries.empty() && max_error() < tol; }
};

struct GradCheckOptions {
  double step = 1e-3;
  size_t max_entries = 24;
  uint64_t seed = 1;
};

template <class T>
using Forward = std::function<Var<T>(Tape<T>&)>;

/// Analytic gradients of `fwd` over `params` against central differences of
/// `ref_fwd` over `ref_params`. The reference must compute the same function
/// with its parameters holding the same values, possibly at higher precision.
template <class T, class R>
GradCheckReport check_gradients_against(std::string label, ParameterSet<T>& params, const Forward<T>& fwd,
                                        ParameterSet<R>& ref_params, const Forward<R>& ref_fwd,
                                        const GradCheckOptions& opt = {}) {
  require(params.size() == ref_params.size(), "gradcheck: reference parameter count differs");
  Rng rng(opt.seed);
  // Probe weights sized from a dry run.
  Tensor<T> weights;
  {
    Tape<T> tape(false);
    const Tensor<T>& out = fwd(tape).value();
    weights = Tensor<T>(out.shape());
    for (auto& v : weights.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  }
  auto probe = [&]() {
    Tape<R> tape(false);
    const Tensor<R>& out = ref_fwd(tape).value();
    double s = 0;
    for (size_t i = 0; i < out.size(); ++i)
      s += static_cast<double>(weights[i]) * static_cast<double>(out[i]);
    return s;
  };

  params.zero_grad();
  {
    Tape<T> tape(true);
    Var<T> loss = weighted_sum(fwd(tape), weights);
    tape.backward(loss);
  }

  GradCheckReport report{std::move(label), {}};
  const R h = static_cast<R>(opt.step);
  for (size_t p = 0; p < params.size(); ++p) {
    const Parameter<T>& param = params[p];
    Parameter<R>& ref = ref_params[p];
    require(ref.value.shape() == param.value.shape(), "gradcheck: reference shape differs for '" + param.name + "'");
    GradCheckEntry e;
    e.name = param.name;
    const size_t n = param.value.size();

    std::vector<size_t> coords(n);
    std::iota(coords.begin(), coords.end(), size_t{0});
    if (n > opt.max_entries) {
      for (size_t i = 0; i < opt.max_entries; ++i)
        std::swap(coords[i], coords[i + rng.below(n - i)]);
      coords.resize(opt.max_entries);
    }
    double num_max = 0, ana_max = 0, diff_max = 0;
    for (size_t j : coords) {
      const R saved = ref.value[j];
      ref.value[j] = saved + h;
      const double up = probe();
      ref.value[j] = saved - h;
      const double down = probe();
      ref.value[j] = saved;
      const double num = (up - down) / (2.0 * static_cast<double>(h));
      const double ana = static_cast<double>(param.grad[j]);
      num_max = std::max(num_max, std::abs(num));
      ana_max = std::max(ana_max, std::abs(ana));
      diff_max = std::max(diff_max, std::abs(num - ana));
    }
    e.coordinates = coords.size();
    e.entry_error = diff_max / std::max({num_max, ana_max, 1e-30});

    // Random direction over every coordinate.
    std::vector<R> dir(n);
    for (auto& v : dir) v = static_cast<R>(rng.uniform() < 0.5 ? -1.0 : 1.0);
    const Tensor<R> saved = ref.value;
    for (size_t j = 0; j < n; ++j) ref.value[j] = saved[j] + h * dir[j];
    const double up = probe();
    for (size_t j = 0; j < n; ++j) ref.value[j] = saved[j] - h * dir[j];
    const double down = probe();
    ref.value = saved;
    const double num = (up - down) / (2.0 * static_cast<double>(h));
    double ana = 0, scale = 0;
    for (size_t j = 0; j < n; ++j) {
      ana += static_cast<double>(param.grad[j]) * dir[j];
      scale += std::abs(static_cast<double>(param.grad[j]));
    }
    e.direction_error = std::abs(num - ana) / std::max({scale, std::abs(num), 1e-30});
    report.entries.push_back(std::move(e));
  }
  return report;
}

/// Central differences of the function itself, at its own precision.
template <class T>
GradCheckReport check_gradients(std::string label, ParameterSet<T>& params, const Forward<T>& fwd,
                                const GradCheckOptions& opt = {}) {
  return check_gradients_against<T, T>(std::move(label), params, fwd, params, fwd, opt);
}

}  // namespace odlc
