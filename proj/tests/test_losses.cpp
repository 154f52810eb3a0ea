#include <gtest/gtest.h>

#include <odlc/gradcheck.hpp>
#include <odlc/losses.hpp>

#include "test_util.hpp"

namespace odlc {
namespace {

using testing::conv_oracle;
using testing::correlated_pair;
using testing::oracle_ms_ssim;
using testing::oracle_ssim;
using testing::plane_of;
using testing::random_tensor;

double lib_ms_ssim(const Tensor<double>& x, const Tensor<double>& y, const MsSsimConfig& cfg) {
  Tape<double> tape(false);
  return ms_ssim(tape.constant(x), tape.constant(y), cfg).value()[0];
}

TEST(MsSsimConfig, DefaultConstants) {
  const MsSsimConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.c1(), 1e-4);
  EXPECT_DOUBLE_EQ(cfg.c2(), 9e-4);
  EXPECT_EQ(cfg.scales, 5);
  EXPECT_EQ(cfg.min_side(), 176);
  double s = 0;
  for (double w : cfg.weights) s += w;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(MsSsimConfig, FitScalesReducesAndRenormalizes) {
  const auto f = fit_scales(MsSsimConfig{}, 64, 80);
  EXPECT_EQ(f.scales, 3);
  ASSERT_EQ(f.weights.size(), 3u);
  const double head = 0.0448 + 0.2856 + 0.3001;
  EXPECT_NEAR(f.weights[0], 0.0448 / head, 1e-12);
  EXPECT_NEAR(f.weights[2], 0.3001 / head, 1e-12);
  EXPECT_NO_THROW(f.validate());
  EXPECT_EQ(fit_scales(MsSsimConfig{}, 200, 200).scales, 5);
  EXPECT_THROW(fit_scales(MsSsimConfig{}, 10, 64), Error);
}

TEST(SsimScale, IdenticalInputsGiveOne) {
  Rng rng(1);
  Tape<double> tape(false);
  auto x = tape.constant(random_tensor<double>({1, 32, 32}, rng, 0, 1));
  const auto t = ssim_scale(x, x, MsSsimConfig{});
  EXPECT_NEAR(t.ssim.value()[0], 1.0, 1e-6);
  EXPECT_NEAR(t.cs.value()[0], 1.0, 1e-6);
}

TEST(SsimScale, ConstantImagesClosedForm) {
  Tape<double> tape(false);
  const double a = 0.2, b = 0.4, c1 = 1e-4;
  const auto t = ssim_scale(tape.constant(Tensor<double>({1, 16, 16}, a)),
                            tape.constant(Tensor<double>({1, 16, 16}, b)), MsSsimConfig{});
  EXPECT_NEAR(t.ssim.value()[0], (2 * a * b + c1) / (a * a + b * b + c1), 1e-9);
  EXPECT_NEAR(t.cs.value()[0], 1.0, 1e-9);
}

TEST(SsimScale, MatchesDirectOracleOn32x32) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto [x, y] = correlated_pair(32, 32, 0.2, rng);
    Tape<double> tape(false);
    const auto t = ssim_scale(tape.constant(x), tape.constant(y), MsSsimConfig{});
    const auto o = oracle_ssim(plane_of(x), plane_of(y), 1e-4, 9e-4);
    EXPECT_NEAR(t.ssim.value()[0], o.ssim, 1e-6);
    EXPECT_NEAR(t.cs.value()[0], o.cs, 1e-6);
  }
}

TEST(SsimScale, BelowWindowRejected) {
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>({1, 10, 20}, 0.5));
  EXPECT_THROW(ssim_scale(x, x, MsSsimConfig{}), Error);
}

TEST(MsSsim, MatchesDirectOracleOnFiftyRandomPairs) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 22 + static_cast<int>(rng.below(40)), w = 22 + static_cast<int>(rng.below(40));
    auto [x, y] = correlated_pair(h, w, rng.uniform(0.02, 0.5), rng);
    const auto cfg = fit_scales(MsSsimConfig{}, h, w);
    EXPECT_NEAR(lib_ms_ssim(x, y, cfg), oracle_ms_ssim(plane_of(x), plane_of(y), cfg.weights), 1e-5)
        << h << "x" << w;
  }
}

TEST(MsSsim, MatchesDirectOracleAt192FiveScales) {
  Rng rng(4);
  auto [x, y] = correlated_pair(192, 192, 0.15, rng);
  const MsSsimConfig cfg;
  EXPECT_NEAR(lib_ms_ssim(x, y, cfg), oracle_ms_ssim(plane_of(x), plane_of(y), cfg.weights), 1e-5);
}

TEST(MsSsim, SinglePrecisionTracksOracle) {
  Rng rng(5);
  auto [x, y] = correlated_pair(64, 64, 0.1, rng);
  const auto cfg = fit_scales(MsSsimConfig{}, 64, 64);
  Tape<float> tape(false);
  const double got = ms_ssim(tape.constant(Tensor<float>::cast(x)), tape.constant(Tensor<float>::cast(y)), cfg).value()[0];
  EXPECT_NEAR(got, oracle_ms_ssim(plane_of(x), plane_of(y), cfg.weights), 1e-4);
}

TEST(MsSsim, IdentityAndExactSymmetry) {
  Rng rng(6);
  auto [x, y] = correlated_pair(48, 48, 0.3, rng);
  const auto cfg = fit_scales(MsSsimConfig{}, 48, 48);
  EXPECT_NEAR(lib_ms_ssim(x, x, cfg), 1.0, 1e-6);
  EXPECT_EQ(lib_ms_ssim(x, y, cfg), lib_ms_ssim(y, x, cfg));
}

TEST(MsSsim, TooSmallForScalesRejected) {
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>({1, 64, 64}, 0.5));
  EXPECT_THROW(ms_ssim(x, x, MsSsimConfig{}), Error);
}

TEST(MsSsim, MonotoneUnderIncreasingNoise) {
  Rng rng(7);
  Tensor<double> x = random_tensor<double>({1, 48, 48}, rng, 0.2, 0.8);
  Tensor<double> dir = random_tensor<double>({1, 48, 48}, rng, -1, 1);
  const auto cfg = fit_scales(MsSsimConfig{}, 48, 48);
  std::vector<double> scores;
  for (int level = 1; level <= 20; ++level) {
    Tensor<double> y = x;
    for (size_t i = 0; i < y.size(); ++i) y[i] += 0.01 * level * dir[i];
    scores.push_back(lib_ms_ssim(x, y, cfg));
  }
  // Every pair of noise levels must be ordered.
  int concordant = 0, total = 0;
  for (size_t i = 0; i < scores.size(); ++i)
    for (size_t j = i + 1; j < scores.size(); ++j, ++total) concordant += scores[j] < scores[i];
  EXPECT_EQ(concordant, total);
}

TEST(HumanDistortion, ZeroAtIdentityAndInUnitRange) {
  Rng rng(8);
  Tape<double> tape(false);
  auto x = tape.constant(random_tensor<double>({3, 40, 40}, rng, 0, 1));
  const auto cfg = fit_scales(MsSsimConfig{}, 40, 40);
  EXPECT_NEAR(human_distortion(x, x, cfg).value()[0], 0.0, 1e-6);
  for (int i = 0; i < 10; ++i) {
    auto y = tape.constant(random_tensor<double>({3, 40, 40}, rng, 0, 1));
    const double d = human_distortion(x, y, cfg).value()[0];
    EXPECT_GE(d, 0.0);
    EXPECT_LT(d, 1.0);
  }
}

TEST(HumanDistortion, GradientMatchesFiniteDifferencesAt80x80TwoScales) {
  Rng rng(9);
  auto [x1, y1] = correlated_pair(80, 80, 0.1, rng);
  Tensor<double> x({3, 80, 80}), y({3, 80, 80});
  for (int c = 0; c < 3; ++c)
    for (size_t i = 0; i < x1.size(); ++i) {
      x[c * x1.size() + i] = x1[i];
      y[c * x1.size() + i] = y1[i];
    }
  MsSsimConfig cfg = fit_scales(MsSsimConfig{}, 80, 80);
  cfg.scales = 2;
  cfg.weights.resize(2);
  const double s = cfg.weights[0] + cfg.weights[1];
  for (auto& w : cfg.weights) w /= s;

  ParameterSet<double> params;
  params.add("y", y);
  Forward<double> fwd = [&](Tape<double>& tape) {
    return human_distortion(tape.constant(x), tape.param(params.get("y")), cfg);
  };
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.max_entries = 60;
  const auto r = check_gradients<double>("d_H", params, fwd, opt);
  EXPECT_TRUE(r.passed(1e-3)) << r.max_error();
}

ClassifierArch toy_arch() {
  ClassifierArch a;
  a.widths = {3, 4};
  a.convs_per_block = 1;
  a.num_classes = 3;
  a.input_size = 12;
  a.norm = {{0.4f, 0.5f, 0.6f}, {0.2f, 0.25f, 0.3f}};
  return a;
}

Tensor<double> relu_of(Tensor<double> t) {
  for (auto& v : t.data()) v = std::max(v, 0.0);
  return t;
}

TEST(FeatureDistortion, MatchesNestedLoopOracleTwoLayers) {
  Rng rng(10);
  auto p = ClassifierParams<double>::init(toy_arch(), rng);
  for (auto& v : p.params.get("b1.c1.b").value.data()) v = rng.uniform(-0.2, 0.2);
  const Tensor<double> x = random_tensor<double>({3, 12, 12}, rng, 0, 1);
  const Tensor<double> y = random_tensor<double>({3, 12, 12}, rng, 0, 1);

  auto taps = [&](const Tensor<double>& img) {
    Tensor<double> n = img;
    const auto& norm = p.arch.norm;
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 144; ++i) n[c * 144 + i] = (n[c * 144 + i] - norm.mean[c]) / norm.stddev[c];
    Tensor<double> a = relu_of(conv_oracle(n, p.params.get("b1.c1.w").value, p.params.get("b1.c1.b").value, 1, true));
    Tensor<double> b = relu_of(conv_oracle(a, p.params.get("b2.c1.w").value, p.params.get("b2.c1.b").value, 2, true));
    return std::pair{a, b};
  };
  const auto [xa, xb] = taps(x);
  const auto [ya, yb] = taps(y);
  auto msq = [](const Tensor<double>& u, const Tensor<double>& v) {
    double s = 0;
    for (size_t i = 0; i < u.size(); ++i) s += (u[i] - v[i]) * (u[i] - v[i]);
    return s / static_cast<double>(u.size());
  };
  const double expected = msq(xa, ya) + msq(xb, yb);

  Tape<double> tape(false);
  const double got =
      feature_distortion(tape.constant(x), tape.constant(y), p, {"1.1", "2.1"}).value()[0];
  EXPECT_NEAR(got, expected, 1e-6);
  const double swapped =
      feature_distortion(tape.constant(y), tape.constant(x), p, {"1.1", "2.1"}).value()[0];
  EXPECT_NEAR(got, swapped, 1e-12);
  EXPECT_GE(got, 0.0);
  EXPECT_EQ(feature_distortion(tape.constant(x), tape.constant(x), p, {"1.1", "2.1"}).value()[0], 0.0);
}

TEST(FeatureDistortion, ConstantOffsetGivesCSquared) {
  Rng rng(11);
  const auto p = ClassifierParams<double>::init(toy_arch(), rng);
  Tape<double> tape(false);
  auto y = tape.constant(random_tensor<double>({3, 12, 12}, rng, 0, 1));
  auto taps = classifier_forward_frozen(tape, y, p, {"2.1"}, false).taps;
  const double c = 0.7;
  std::map<std::string, Var<double>> ref{{"2.1", add_scalar(taps.at("2.1"), c)}};
  EXPECT_NEAR(feature_distortion(ref, y, p, {"2.1"}).value()[0], c * c, 1e-12);
}

TEST(FeatureDistortion, UnknownLayerRejected) {
  Rng rng(12);
  const auto p = ClassifierParams<double>::init(toy_arch(), rng);
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>({3, 12, 12}, 0.5));
  EXPECT_THROW(feature_distortion(x, x, p, {"3.1"}), Error);
  EXPECT_THROW(feature_distortion(x, x, p, {"1.2"}), Error);
  EXPECT_THROW(feature_distortion(x, x, p, {"abc"}), Error);
}

struct ObserverFixture : ::testing::Test {
  Rng rng{13};
  ClassifierParams<double> net = ClassifierParams<double>::init(toy_arch(), rng);
  Tensor<double> x = random_tensor<double>({3, 24, 24}, rng, 0, 1);
  Tensor<double> y = random_tensor<double>({3, 24, 24}, rng, 0, 1);

  LossConfig cfg(double alpha) {
    LossConfig c;
    c.alpha = alpha;
    c.layer_ids = {"1.1", "2.1"};
    return c;
  }
  struct Evaluated {
    double value;
    std::optional<double> human, feature;
  };
  Evaluated eval(double alpha) {
    Tape<double> tape(false);
    const auto d = observer_distortion(tape.constant(x), tape.constant(y), cfg(alpha), &net);
    return {d.value.value()[0], d.human, d.feature};
  }
  double dh() {
    Tape<double> tape(false);
    return human_distortion(tape.constant(x), tape.constant(y), fit_scales(MsSsimConfig{}, 24, 24)).value()[0];
  }
  double dc() {
    Tape<double> tape(false);
    return feature_distortion(tape.constant(x), tape.constant(y), net, {"1.1", "2.1"}).value()[0];
  }
};

TEST_F(ObserverFixture, EndpointsAreExact) {
  const auto e0 = eval(0.0);
  EXPECT_EQ(e0.value, 5000.0 * dh());
  EXPECT_FALSE(e0.feature.has_value());
  const auto e1 = eval(1.0);
  EXPECT_EQ(e1.value, dc());
  EXPECT_FALSE(e1.human.has_value());
}

TEST_F(ObserverFixture, AlphaZeroRunsNoLossNetwork) {
  Tape<double> tape(false);
  observer_distortion<double>(tape.constant(x), tape.constant(y), cfg(0.0), nullptr);
  EXPECT_EQ(tape.count("relu"), 0u);
  Tape<double> tape1(false);
  observer_distortion(tape1.constant(x), tape1.constant(y), cfg(1.0), &net);
  EXPECT_EQ(tape1.count("avg_pool2"), 0u);
}

TEST_F(ObserverFixture, AffineInAlpha) {
  const double mid = eval(0.5).value;
  EXPECT_NEAR(mid, 0.5 * (eval(0.0).value + eval(1.0).value), 1e-6);
}

TEST(ObserverDistortion, WorkedCombination) {
  // (1 - 0.5) * 5000 * 0.1 + 0.5 * 250
  Tape<double> tape(false);
  auto dh = tape.constant(Tensor<double>({1}, 0.1));
  auto dc = tape.constant(Tensor<double>({1}, 250.0));
  const LossConfig c{0.5};
  auto v = add(scale(dh, (1 - c.alpha) * c.lambda_h), scale(dc, c.alpha));
  EXPECT_DOUBLE_EQ(v.value()[0], 375.0);
}

TEST(ObserverDistortion, LossNetworkGradientsStayZero) {
  Rng rng(14);
  auto net = ClassifierParams<float>::init(toy_arch(), rng);
  Tensor<float> xt = random_tensor<float>({3, 24, 24}, rng, 0, 1);
  ParameterSet<float> ys;
  ys.add("y", random_tensor<float>({3, 24, 24}, rng, 0, 1));
  LossConfig cfg;
  cfg.alpha = 0.5;
  cfg.layer_ids = {"1.1", "2.1"};
  net.params.zero_grad();
  Tape<float> tape;
  auto y = tape.param(ys.get("y"));
  auto d = observer_distortion(tape.constant(xt), y, cfg, &net);
  tape.backward(d.value);
  for (size_t i = 0; i < net.params.size(); ++i)
    for (float g : net.params[i].grad.data()) ASSERT_EQ(g, 0.0f) << net.params[i].name;
  double gy = 0;
  for (float g : ys.get("y").grad.data()) gy += std::abs(g);
  EXPECT_GT(gy, 0.0);
}

TEST(LossConfig, ValidationRules) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), Error);
  c.alpha = 1.0;
  c.layer_ids.clear();
  EXPECT_THROW(c.validate(), Error);
  c.alpha = 0.0;
  EXPECT_NO_THROW(c.validate());
  c.lambda_h = 0;
  EXPECT_THROW(c.validate(), Error);
}

}  // namespace
}  // namespace odlc
