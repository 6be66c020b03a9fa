#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mink/autograd.hpp"
#include "test_util.hpp"

using namespace mink;
using namespace testutil;

TEST(Tape, SumGradientIsAllOnes) {
  ag::Tape t;
  std::mt19937_64 rng(1);
  auto x = t.input(random_matrix(4, 3, rng));
  auto s = ag::sum(t, x);
  t.backward(s);
  for (double g : t.grad(x).storage()) EXPECT_EQ(g, 1.0);
}

TEST(Tape, FanOutAccumulates) {
  ag::Tape t;
  Matrix<double> v(2, 2, 1.5);
  auto x = t.input(v);
  auto y = ag::add(t, x, x);
  t.backward(ag::sum(t, y));
  for (double g : t.grad(x).storage()) EXPECT_EQ(g, 2.0);
}

TEST(Tape, RepeatedBackwardDoesNotStack) {
  ag::Tape t;
  auto x = t.input(Matrix<double>(1, 3, 2.0));
  auto loss = ag::sum(t, ag::relu(t, x));
  t.backward(loss);
  t.backward(loss);
  for (double g : t.grad(x).storage()) EXPECT_EQ(g, 1.0);
}

TEST(Tape, BackwardNeedsScalar) {
  ag::Tape t;
  auto x = t.input(Matrix<double>(2, 2));
  EXPECT_THROW(t.backward(x), std::invalid_argument);
  EXPECT_THROW(t.backward(ag::Var{}), std::invalid_argument);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  ag::Tape t;
  auto z = t.input(Matrix<double>(3, 4, 0.7));
  std::vector<std::int32_t> labels{0, 3, 2};
  auto loss = ag::cross_entropy(t, z, labels);
  EXPECT_NEAR(t.value(loss)(0, 0), std::log(4.0), 1e-15);
  t.backward(loss);
  // d/dz = (softmax - onehot) / N
  EXPECT_NEAR(t.grad(z)(0, 0), (0.25 - 1.0) / 3.0, 1e-15);
  EXPECT_NEAR(t.grad(z)(0, 1), 0.25 / 3.0, 1e-15);
}

TEST(CrossEntropy, IgnoredRowsContributeNothing) {
  ag::Tape t;
  std::mt19937_64 rng(2);
  auto z = t.input(random_matrix(3, 2, rng));
  std::vector<std::int32_t> labels{kIgnoreLabel, 1, kIgnoreLabel};
  auto loss = ag::cross_entropy(t, z, labels);
  const auto& v = t.value(z);
  const double expect = std::log(std::exp(v(1, 0)) + std::exp(v(1, 1))) - v(1, 1);
  EXPECT_NEAR(t.value(loss)(0, 0), expect, 1e-14);
  t.backward(loss);
  EXPECT_EQ(t.grad(z)(0, 0), 0.0);
  EXPECT_EQ(t.grad(z)(2, 1), 0.0);

  ag::Tape t2;
  auto z2 = t2.input(Matrix<double>(2, 2));
  std::vector<std::int32_t> none{kIgnoreLabel, kIgnoreLabel};
  EXPECT_EQ(t2.value(ag::cross_entropy(t2, z2, none))(0, 0), 0.0);
}

TEST(CrossEntropy, RejectsOutOfRangeLabels) {
  ag::Tape t;
  auto z = t.input(Matrix<double>(1, 2));
  std::vector<std::int32_t> labels{2};
  EXPECT_THROW(ag::cross_entropy(t, z, labels), std::invalid_argument);
}

TEST(Ops, ConcatAndGatherGradients) {
  std::mt19937_64 rng(3);
  auto a = random_matrix(4, 2, rng), b = random_matrix(4, 3, rng);
  auto r = random_matrix(3, 5, rng);
  std::vector<std::size_t> idx{2, 0, 2};
  auto run = [&](bool grads, std::vector<double>* ga, std::vector<double>* gb) {
    ag::Tape t;
    auto va = t.input(a), vb = t.input(b);
    auto y = ag::gather_rows(t, ag::concat(t, va, vb), idx, nullptr);
    auto l = ag::dot(t, y, r);
    if (grads) {
      t.backward(l);
      *ga = t.grad(va).storage();
      *gb = t.grad(vb).storage();
    }
    return t.value(l)(0, 0);
  };
  std::vector<double> ga, gb;
  run(true, &ga, &gb);
  auto f = [&] { return run(false, nullptr, nullptr); };
  EXPECT_LT(relative_error(ga, numeric_gradient(a.storage(), f)), 1e-8);
  EXPECT_LT(relative_error(gb, numeric_gradient(b.storage(), f)), 1e-8);
  // Row 1 of the inputs is never gathered.
  EXPECT_EQ(ga[2], 0.0);
}

TEST(Ops, ConvWithBiasGradient) {
  std::mt19937_64 rng(4);
  auto coords = random_coords(2, 15, 5, rng);
  auto region = KernelRegion::hypercross(2, 3);
  auto map = std::make_shared<const KernelMap>(build_kernel_map(*coords, *coords, region));
  ag::Parameter w("w", region.volume() * 2, 3, {region.volume(), 2, 3});
  w.value = random_matrix(region.volume() * 2, 3, rng);
  ag::Parameter b("b", 1, 2);
  b.value = random_matrix(1, 2, rng);
  auto x = random_matrix(coords->size(), 3, rng);
  auto r = random_matrix(coords->size(), 2, rng);
  auto f = [&] {
    ag::Tape t;
    return t.value(ag::dot(t, ag::conv(t, t.input(x, coords), w, map, coords, &b), r))(0, 0);
  };
  ag::Tape t;
  auto l = ag::dot(t, ag::conv(t, t.input(x, coords), w, map, coords, &b), r);
  w.zero_grad();
  b.zero_grad();
  t.backward(l);
  EXPECT_LT(relative_error(w.grad.storage(), numeric_gradient(w.value.storage(), f)), 1e-8);
  EXPECT_LT(relative_error(b.grad.storage(), numeric_gradient(b.value.storage(), f)), 1e-8);
}

TEST(Optim, MomentumSgdTwoSteps) {
  ag::Parameter p("p", 1, 1);
  p.value(0, 0) = 1.0;
  std::vector<ag::Parameter*> ps{&p};
  const double lr = 0.1, g = 0.5;
  for (int i = 0; i < 2; ++i) {
    p.grad(0, 0) = g;
    ag::sgd_step(ps, lr, 0.9);
  }
  // b1 = g, b2 = 0.9 g + g; displacement lr * g * (1 + 1.9).
  EXPECT_NEAR(p.value(0, 0), 1.0 - lr * g * 2.9, 1e-15);
}

TEST(Optim, PolyScheduleEndpoints) {
  ag::PolySchedule s{0.2, 0.9, 100};
  EXPECT_EQ(s.lr(0), 0.2);
  EXPECT_NEAR(s.lr(50), 0.2 * std::pow(0.5, 0.9), 1e-15);
  EXPECT_EQ(s.lr(100), 0.0);
  EXPECT_EQ(s.lr(1000), 0.0);
}

TEST(Optim, ZeroGradClears) {
  ag::Parameter p("p", 2, 2);
  p.grad.fill(3.0);
  std::vector<ag::Parameter*> ps{&p};
  ag::zero_grad(ps);
  for (double v : p.grad.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Parameter, ConvShapeRequired) {
  ag::Parameter p("plain", 2, 2);
  EXPECT_THROW(ag::as_conv_weights(p), std::invalid_argument);
}

TEST(CrossEntropy, SingleRowGradientIsSoftmaxMinusOneHot) {
  std::mt19937_64 rng(30);
  ag::Tape t;
  auto z = t.input(random_matrix(1, 5, rng, -2, 2));
  std::vector<std::int32_t> y{3};
  t.backward(ag::cross_entropy(t, z, y));
  auto q = softmax_rows(t.value(z));
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(t.grad(z)(0, c), q(0, c) - (c == 3 ? 1.0 : 0.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveZeroLoss) {
  ag::Tape t;
  Matrix<double> z(2, 3, -50.0);
  z(0, 1) = 50.0, z(1, 2) = 50.0;
  std::vector<std::int32_t> y{1, 2};
  EXPECT_LT(t.value(ag::cross_entropy(t, t.input(z), y))(0, 0), 1e-40);
}

TEST(CrossEntropy, RandomInstanceMatchesDirectFormula) {
  std::mt19937_64 rng(31);
  auto z = random_matrix(5, 4, rng, -3, 3);
  std::vector<std::int32_t> y{0, 3, 1, 1, 2};
  double want = 0;
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += std::exp(z(r, c));
    want += -std::log(std::exp(z(r, y[r])) / s);
  }
  want /= 5;
  ag::Tape t;
  EXPECT_NEAR(t.value(ag::cross_entropy(t, t.input(z), y))(0, 0), want, 1e-10);
}

TEST(Optim, ZeroGradientLeavesParameterAlone) {
  ag::Parameter p("p", 1, 2);
  p.value(0, 0) = 0.3, p.value(0, 1) = -0.7;
  auto before = p.value;
  std::vector<ag::Parameter*> ps{&p};
  ag::sgd_step(ps, 0.5, 0.9);
  EXPECT_EQ(p.value, before);
}

TEST(Optim, ZeroMomentumIsPlainDescent) {
  ag::Parameter p("p", 1, 1);
  std::vector<ag::Parameter*> ps{&p};
  for (int i = 0; i < 3; ++i) {
    p.grad(0, 0) = 2.0;
    ag::sgd_step(ps, 0.1, 0.0);
  }
  EXPECT_NEAR(p.value(0, 0), -0.6, 1e-15);
}
