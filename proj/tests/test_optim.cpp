#include <gtest/gtest.h>

#include <odlc/optim.hpp>

namespace odlc {
namespace {

ParameterSet<double> one_param(std::vector<double> v) {
  ParameterSet<double> p;
  const int n = static_cast<int>(v.size());
  p.add("w", Tensor<double>({n}, std::move(v)));
  return p;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = one_param({1.0, -2.0, 3.0});
  const auto before = p.get("w").value;
  Adam<double> adam;
  p.zero_grad();
  adam.step(p);
  EXPECT_EQ(p.get("w").value, before);
  for (double m : adam.first_moments()[0].data()) EXPECT_EQ(m, 0.0);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  auto p = one_param({0.0});
  Adam<double> adam;
  p.get("w").grad[0] = 1.0;
  adam.step(p);
  const double m1 = adam.first_moments()[0][0], v1 = adam.second_moments()[0][0];
  p.get("w").grad[0] = 0.0;
  adam.step(p);
  EXPECT_NEAR(adam.first_moments()[0][0], 0.9 * m1, 1e-15);
  EXPECT_NEAR(adam.second_moments()[0][0], 0.999 * v1, 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstSign) {
  auto p = one_param({0.0, 0.0, 0.0});
  p.get("w").grad = Tensor<double>({3}, std::vector<double>{0.3, -7.0, 1e-3});
  Adam<double> adam({4e-4, 0.9, 0.999, 1e-8});
  adam.step(p);
  EXPECT_NEAR(p.get("w").value[0], -4e-4, 1e-10);
  EXPECT_NEAR(p.get("w").value[1], 4e-4, 1e-10);
  EXPECT_NEAR(p.get("w").value[2], -4e-4, 1e-8);
}

TEST(Adam, QuadraticTrajectoryMatchesReferenceFormula) {
  // f(w) = 0.5 * sum_i a_i (w_i - c_i)^2
  const std::vector<double> a{1.0, 4.0, 0.25}, c{0.5, -1.0, 2.0};
  auto p = one_param({0.0, 0.0, 0.0});
  Adam<double> adam({0.05, 0.9, 0.999, 1e-8});
  std::vector<double> w(3, 0.0), m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 100; ++t) {
    for (int i = 0; i < 3; ++i) p.get("w").grad[i] = a[i] * (p.get("w").value[i] - c[i]);
    adam.step(p);
    for (int i = 0; i < 3; ++i) {
      const double g = a[i] * (w[i] - c[i]);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.get("w").value[i], w[i], 1e-6);
  EXPECT_EQ(adam.steps(), 100);
}

TEST(Adam, NonFiniteGradientRejectsWholeStep) {
  ParameterSet<double> p;
  p.add("a", Tensor<double>({2}, 1.0));
  p.add("b", Tensor<double>({2}, 1.0));
  p.get("a").grad = Tensor<double>({2}, 1.0);
  p.get("b").grad[1] = std::numeric_limits<double>::quiet_NaN();
  Adam<double> adam;
  EXPECT_THROW(adam.step(p), Error);
  EXPECT_EQ(p.get("a").value, Tensor<double>({2}, 1.0));
  EXPECT_EQ(adam.steps(), 0);
  p.get("b").grad[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adam.step(p), Error);
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  auto p = one_param({0.0, 0.0});
  p.get("w").grad = Tensor<double>({2}, std::vector<double>{3.0, 4.0});
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 10.0), 5.0);
  EXPECT_DOUBLE_EQ(p.get("w").grad[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 1.0), 5.0);
  EXPECT_NEAR(global_grad_norm(p), 1.0, 1e-12);
  EXPECT_NEAR(p.get("w").grad[1], 0.8, 1e-12);
}

}  // namespace
}  // namespace odlc
