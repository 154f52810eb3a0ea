#pragma once

// Finite-difference gradient suite over every differentiable op plus a few
// composite losses. The full codec is also probed, unrolled for two steps on a
// 16x16 image.

#include <chrono>
#include <iomanip>

#include "odlc/codec.hpp"
#include "odlc/gradcheck.hpp"
#include "odlc/losses.hpp"

namespace odlc {

template <class T>
struct SuiteTolerance;
template <>
struct SuiteTolerance<float> {
  static constexpr double step = 1e-3, tolerance = 1e-3;
  static constexpr const char* name = "f32";
};
template <>
struct SuiteTolerance<double> {
  static constexpr double step = 1e-5, tolerance = 1e-5;
  static constexpr const char* name = "f64";
};

struct OpSuiteResult {
  std::string op;
  int instances = 0;
  double worst = 0;
  std::string worst_param;
  bool passed = false;
};

struct GradientSuiteResult {
  std::string dtype;
  double tolerance = 0;
  double seconds = 0;
  std::vector<OpSuiteResult> ops;

  bool passed() const {
    return !ops.empty() && std::all_of(ops.begin(), ops.end(), [](const auto& o) { return o.passed; });
  }
  double worst() const {
    double w = 0;
    for (const auto& o : ops) w = std::max(w, o.worst);
    return w;
  }
};

namespace detail {

template <class T>
Tensor<T> rand_t(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Magnitudes in [lo, hi] with random sign, keeping away from zero.
template <class T>
Tensor<T> rand_away_from_zero(Shape s, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1 : 1));
  return t;
}

inline int rand_int(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo + 1))); }

/// Builds one random instance: fills `ps` and returns the forward function.
template <class T>
using CaseBuilder = std::function<Forward<T>(ParameterSet<T>& ps, Rng& rng)>;

template <class T>
std::vector<std::pair<std::string, CaseBuilder<T>>> op_cases() {
  using P = ParameterSet<T>;
  auto X = [](Tape<T>& t, P& ps, const char* n) { return t.param(ps.get(n)); };
  auto shape3 = [](Rng& r) { return Shape{rand_int(r, 1, 3), rand_int(r, 2, 5), rand_int(r, 2, 5)}; };
  std::vector<std::pair<std::string, CaseBuilder<T>>> c;

  auto unary = [&](std::string name, std::function<Var<T>(Var<T>)> f, double lo, double hi, bool avoid_zero) {
    c.emplace_back(name, [=](P& ps, Rng& r) -> Forward<T> {
      const Shape s = shape3(r);
      ps.add("x", avoid_zero ? rand_away_from_zero<T>(s, r, lo, hi) : rand_t<T>(s, r, lo, hi));
      return [&ps, f, X](Tape<T>& t) { return f(X(t, ps, "x")); };
    });
  };
  unary("tanh", [](Var<T> a) { return tanh(a); }, -2, 2, false);
  unary("sigmoid", [](Var<T> a) { return sigmoid(a); }, -3, 3, false);
  unary("relu", [](Var<T> a) { return relu(a); }, 0.05, 1, true);
  unary("square", [](Var<T> a) { return square(a); }, -1, 1, false);
  unary("scale", [](Var<T> a) { return scale(a, T(-1.7)); }, -1, 1, false);
  unary("add_scalar", [](Var<T> a) { return add_scalar(a, T(0.3)); }, -1, 1, false);
  unary("pow_floor", [](Var<T> a) { return pow_floor(a, T(0.37), T(1e-6)); }, 0.2, 1.5, false);
  unary("sum", [](Var<T> a) { return sum(a); }, -1, 1, false);
  unary("mean", [](Var<T> a) { return mean(a); }, -1, 1, false);
  unary("global_avg_pool", [](Var<T> a) { return global_avg_pool(a); }, -1, 1, false);

  auto binary = [&](std::string name, std::function<Var<T>(Var<T>, Var<T>)> f, bool safe_b) {
    c.emplace_back(name, [=](P& ps, Rng& r) -> Forward<T> {
      const Shape s = shape3(r);
      ps.add("a", rand_t<T>(s, r));
      ps.add("b", safe_b ? rand_away_from_zero<T>(s, r, 0.5, 1.5) : rand_t<T>(s, r));
      return [&ps, f, X](Tape<T>& t) { return f(X(t, ps, "a"), X(t, ps, "b")); };
    });
  };
  binary("add", [](Var<T> a, Var<T> b) { return add(a, b); }, false);
  binary("sub", [](Var<T> a, Var<T> b) { return sub(a, b); }, false);
  binary("mul", [](Var<T> a, Var<T> b) { return mul(a, b); }, false);
  binary("div", [](Var<T> a, Var<T> b) { return div(a, b); }, true);

  c.emplace_back("weighted_sum", [=](P& ps, Rng& r) -> Forward<T> {
    const Shape s = shape3(r);
    ps.add("x", rand_t<T>(s, r));
    auto w = std::make_shared<Tensor<T>>(rand_t<T>(s, r));
    return [&ps, w, X](Tape<T>& t) { return weighted_sum(X(t, ps, "x"), *w); };
  });
  c.emplace_back("channel_affine", [=](P& ps, Rng& r) -> Forward<T> {
    const Shape s = shape3(r);
    ps.add("x", rand_t<T>(s, r));
    std::vector<T> a(s[0]), b(s[0]);
    for (int i = 0; i < s[0]; ++i) a[i] = static_cast<T>(r.uniform(-2, 2)), b[i] = static_cast<T>(r.uniform(-1, 1));
    return [&ps, a, b, X](Tape<T>& t) { return channel_affine(X(t, ps, "x"), a, b); };
  });
  c.emplace_back("channel_mix", [=](P& ps, Rng& r) -> Forward<T> {
    const Shape s = shape3(r);
    ps.add("x", rand_t<T>(s, r));
    std::vector<T> w(s[0]);
    for (auto& v : w) v = static_cast<T>(r.uniform(-1, 1));
    return [&ps, w, X](Tape<T>& t) { return channel_mix(X(t, ps, "x"), w); };
  });
  c.emplace_back("channel_slice", [=](P& ps, Rng& r) -> Forward<T> {
    const Shape s{rand_int(r, 2, 5), rand_int(r, 2, 4), rand_int(r, 2, 4)};
    ps.add("x", rand_t<T>(s, r));
    const int begin = rand_int(r, 0, s[0] - 1), count = rand_int(r, 1, s[0] - begin);
    return [&ps, begin, count, X](Tape<T>& t) { return channel_slice(X(t, ps, "x"), begin, count); };
  });
  c.emplace_back("spatial_crop", [=](P& ps, Rng& r) -> Forward<T> {
    const Shape s{rand_int(r, 1, 3), rand_int(r, 3, 6), rand_int(r, 3, 6)};
    ps.add("x", rand_t<T>(s, r));
    const int top = rand_int(r, 0, 2), left = rand_int(r, 0, 2);
    const int h = rand_int(r, 1, s[1] - top), w = rand_int(r, 1, s[2] - left);
    return [&ps, top, left, h, w, X](Tape<T>& t) { return spatial_crop(X(t, ps, "x"), top, left, h, w); };
  });
  c.emplace_back("conv2d", [=](P& ps, Rng& r) -> Forward<T> {
    const int cin = rand_int(r, 1, 3), cout = rand_int(r, 1, 3);
    const int k = std::array{1, 3, 5}[r.below(3)];
    const int stride = rand_int(r, 1, 2);
    const Padding pad = r.uniform() < 0.5 ? Padding::same : Padding::valid;
    const int lo = pad == Padding::valid ? k : 2;
    const bool bias = r.uniform() < 0.5;
    ps.add("x", rand_t<T>({cin, rand_int(r, lo, lo + 4), rand_int(r, lo, lo + 4)}, r));
    ps.add("k", rand_t<T>({cout, cin, k, k}, r));
    if (bias) ps.add("b", rand_t<T>({cout}, r));
    return [&ps, bias, stride, pad, X](Tape<T>& t) {
      std::optional<Var<T>> b;
      if (bias) b = X(t, ps, "b");
      return conv2d(X(t, ps, "x"), X(t, ps, "k"), b, stride, pad);
    };
  });
  c.emplace_back("depth_to_space", [=](P& ps, Rng& r) -> Forward<T> {
    ps.add("x", rand_t<T>({4 * rand_int(r, 1, 3), rand_int(r, 1, 4), rand_int(r, 1, 4)}, r));
    return [&ps, X](Tape<T>& t) { return depth_to_space(X(t, ps, "x"), 2); };
  });
  c.emplace_back("space_to_depth", [=](P& ps, Rng& r) -> Forward<T> {
    ps.add("x", rand_t<T>({rand_int(r, 1, 3), 2 * rand_int(r, 1, 3), 2 * rand_int(r, 1, 3)}, r));
    return [&ps, X](Tape<T>& t) { return space_to_depth(X(t, ps, "x"), 2); };
  });
  c.emplace_back("avg_pool2", [=](P& ps, Rng& r) -> Forward<T> {
    ps.add("x", rand_t<T>({rand_int(r, 1, 3), rand_int(r, 2, 7), rand_int(r, 2, 7)}, r));
    return [&ps, X](Tape<T>& t) { return avg_pool2(X(t, ps, "x")); };
  });
  c.emplace_back("linear", [=](P& ps, Rng& r) -> Forward<T> {
    const int cin = rand_int(r, 1, 6), k = rand_int(r, 1, 5);
    ps.add("x", rand_t<T>({cin}, r));
    ps.add("w", rand_t<T>({k, cin}, r));
    ps.add("b", rand_t<T>({k}, r));
    return [&ps, X](Tape<T>& t) { return linear(X(t, ps, "x"), X(t, ps, "w"), X(t, ps, "b")); };
  });
  c.emplace_back("softmax_cross_entropy", [=](P& ps, Rng& r) -> Forward<T> {
    const int k = rand_int(r, 2, 8);
    ps.add("z", rand_t<T>({k}, r, -2, 2));
    const int label = rand_int(r, 0, k - 1);
    return [&ps, label, X](Tape<T>& t) { return softmax_cross_entropy(X(t, ps, "z"), label); };
  });
  c.emplace_back("conv_gru_cell", [=](P& ps, Rng& r) -> Forward<T> {
    const int cin = rand_int(r, 1, 3), hid = rand_int(r, 1, 3), stride = rand_int(r, 1, 2);
    const int kh = std::array{1, 3}[r.below(2)];
    const int h = rand_int(r, 2, 5), w = rand_int(r, 2, 5);
    ps.add("x", rand_t<T>({cin, h * stride, w * stride}, r));
    ps.add("h", rand_t<T>({hid, h, w}, r));
    ps.add("wx", rand_t<T>({3 * hid, cin, 3, 3}, r, -0.5, 0.5));
    ps.add("bx", rand_t<T>({3 * hid}, r, -0.5, 0.5));
    ps.add("whg", rand_t<T>({2 * hid, hid, kh, kh}, r, -0.5, 0.5));
    ps.add("whc", rand_t<T>({hid, hid, kh, kh}, r, -0.5, 0.5));
    return [&ps, stride, X](Tape<T>& t) {
      GruWeights<T> gw{X(t, ps, "wx"), X(t, ps, "bx"), X(t, ps, "whg"), X(t, ps, "whc")};
      return conv_gru_cell(X(t, ps, "x"), X(t, ps, "h"), gw, stride);
    };
  });
  c.emplace_back("ms_ssim", [=](P& ps, Rng& r) -> Forward<T> {
    // Correlated pair so every scale term stays well above the floor.
    const int n = rand_int(r, 22, 26);
    Tensor<T> x = rand_t<T>({1, n, n}, r, 0, 1), y = x;
    for (auto& v : y.data()) v = static_cast<T>(std::clamp(v + r.uniform(-0.2, 0.2), 0.0, 1.0));
    ps.add("x", std::move(x));
    ps.add("y", std::move(y));
    MsSsimConfig cfg = fit_scales(MsSsimConfig{}, n, n);
    return [&ps, cfg, X](Tape<T>& t) { return ms_ssim(X(t, ps, "x"), X(t, ps, "y"), cfg); };
  });
  c.emplace_back("feature_distortion", [=](P& ps, Rng& r) -> Forward<T> {
    ClassifierArch arch;
    arch.widths = {2, 2, 2, 2, 2};
    arch.input_size = 8;
    auto make_net = [&](auto tag, uint64_t seed) {
      using U = decltype(tag);
      Rng init(seed);
      auto net = ClassifierParams<U>::init(arch, init);
      for (size_t i = 0; i < net.params.size(); ++i)
        if (net.params[i].name.ends_with(".b")) net.params[i].value.fill(U(3));
      return net;
    };
    // Redraw until no pre-activation lies within a finite-difference step of
    // the ReLU kink, judged in double so both precisions pick the same draw.
    const std::vector<std::string> ids{"1.1", "5.1"};
    for (;;) {
      const uint64_t seed = r.next_u64();
      Rng pick = r;
      const auto x = rand_t<double>({3, 8, 8}, pick, 0, 1), y = rand_t<double>({3, 8, 8}, pick, 0, 1);
      const auto net = make_net(double{}, seed);
      double margin = 1e300;
      for (const auto* img : {&x, &y}) {
        Tape<double> tape(false);
        classifier_forward_frozen(tape, tape.constant_ref(*img), net, ids, false);
        for (size_t i = 0; i < tape.size(); ++i) {
          const Var<double> v{&tape, static_cast<int>(i)};
          if (tape.op_name(v) == "conv2d")
            for (double z : v.value().data()) margin = std::min(margin, std::abs(z));
        }
      }
      if (margin < 0.05) {
        r = pick;
        continue;
      }
      r = pick;
      auto tnet = std::make_shared<ClassifierParams<T>>(make_net(T{}, seed));
      ps.add("x", Tensor<T>::cast(x));
      ps.add("y", Tensor<T>::cast(y));
      return [&ps, tnet, ids, X](Tape<T>& t) {
        return feature_distortion(X(t, ps, "x"), X(t, ps, "y"), *tnet, ids);
      };
    }
  });
  return c;
}

}  // namespace detail

template <class T>
Forward<T> codec_forward(CodecParams<T>& p, const Tensor<T>& x, int iterations) {
  return [&p, &x, iterations](Tape<T>& tape) {
    const CodecGraph<T> g = bind_trainable(tape, p);
    CodecState<T> s = initial_state(tape, p.config, x.dim(1), x.dim(2));
    Var<T> xv = tape.constant_ref(x);
    Var<T> r = xv;
    std::optional<Var<T>> xhat;
    for (int t = 0; t < iterations; ++t) {
      StepResult<T> st = codec_step(r, s, g, QuantMode::passthrough, nullptr);
      xhat = xhat ? add(*xhat, st.delta) : st.delta;
      r = sub(xv, *xhat);
    }
    return *xhat;
  };
}

/// Full codec unrolled for `iterations` steps with the quantizer bypassed;
/// the probe covers the final reconstruction. Differences are taken in double
/// at the same parameter values.
template <class T>
GradCheckReport check_codec_gradients(uint64_t seed, int iterations = 2, int size = 16) {
  Rng rng(seed);
  CodecParams<T> p = CodecParams<T>::init(CodecConfig::tiny(), rng);
  for (size_t i = 0; i < p.params.size(); ++i)
    if (p.params[i].name.ends_with(".b") || p.params[i].name.ends_with(".bx"))
      for (auto& v : p.params[i].value.data()) v = static_cast<T>(rng.uniform(-0.3, 0.3));
  const Tensor<T> x = detail::rand_t<T>({3, size, size}, rng, -1.5, 1.5);
  CodecParams<double> ref{p.config, p.params.template cast<double>()};
  const Tensor<double> xr = Tensor<double>::cast(x);
  GradCheckOptions opt;
  opt.step = SuiteTolerance<T>::step;
  opt.seed = seed;
  return check_gradients_against<T, double>("codec", p.params, codec_forward(p, x, iterations), ref.params,
                                            codec_forward(ref, xr, iterations), opt);
}

/// Every op on `instances` random draws, plus the full codec. For 32-bit runs
/// the finite differences come from a double-precision twin of each instance
/// evaluated at the identical (float-representable) parameter values.
template <class T>
GradientSuiteResult run_gradient_suite(int instances = 20, uint64_t seed = 1, bool include_codec = true) {
  const auto start = std::chrono::steady_clock::now();
  GradientSuiteResult res;
  res.dtype = SuiteTolerance<T>::name;
  res.tolerance = SuiteTolerance<T>::tolerance;
  GradCheckOptions opt;
  opt.step = SuiteTolerance<T>::step;
  const auto cases = detail::op_cases<T>();
  const auto twins = detail::op_cases<double>();
  uint64_t case_index = 0;
  auto absorb = [](OpSuiteResult& op, const GradCheckReport& rep) {
    for (const auto& e : rep.entries)
      if (e.error() >= op.worst) {
        op.worst = e.error();
        op.worst_param = e.name;
      }
    ++op.instances;
  };
  for (size_t c = 0; c < cases.size(); ++c) {
    OpSuiteResult op{cases[c].first, 0, 0, "", true};
    for (int i = 0; i < instances; ++i) {
      Rng rng = Rng::derive(seed, ++case_index);
      Rng twin_rng = rng;
      ParameterSet<T> ps;
      const Forward<T> fwd = cases[c].second(ps, rng);
      opt.seed = rng.next_u64();
      if constexpr (std::is_same_v<T, double>) {
        absorb(op, check_gradients<T>(op.op, ps, fwd, opt));
      } else {
        ParameterSet<double> ref;
        const Forward<double> ref_fwd = twins[c].second(ref, twin_rng);
        for (size_t j = 0; j < ps.size(); ++j) ref[j].value = Tensor<double>::cast(ps[j].value);
        absorb(op, check_gradients_against<T, double>(op.op, ps, fwd, ref, ref_fwd, opt));
      }
    }
    op.passed = op.worst < res.tolerance;
    res.ops.push_back(op);
  }
  if (include_codec) {
    OpSuiteResult op{"codec(T=2,16x16)", 0, 0, "", true};
    for (int i = 0; i < 2; ++i) absorb(op, check_codec_gradients<T>(Rng::mix(seed + 101 * i)));
    op.passed = op.worst < res.tolerance;
    res.ops.push_back(op);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

inline std::string format_suite(const GradientSuiteResult& r) {
  std::ostringstream o;
  o << std::scientific << std::setprecision(2);
  for (const auto& op : r.ops)
    o << (op.passed ? "ok   " : "FAIL ") << r.dtype << ' ' << op.op << " instances=" << op.instances
      << " worst=" << op.worst << " (" << op.worst_param << ")\n";
  o << std::defaultfloat << (r.passed() ? "PASS" : "FAIL") << ' ' << r.dtype << " tolerance=" << r.tolerance
    << " seconds=" << r.seconds << '\n';
  return o.str();
}

}  // namespace odlc
