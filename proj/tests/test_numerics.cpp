#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "czsl/numerics/autodiff.hpp"
#include "czsl/numerics/gradcheck.hpp"
#include "czsl/numerics/kernels.hpp"

using namespace czsl;
using namespace czsl::ad;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double std = 1.0) {
  return normal_tensor({r, c}, std, rng);
}

}  // namespace

TEST(Softmax, SymmetricLogitsGiveUniform) {
  const auto p = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LogTwoGivesTwoThirds) {
  const auto p = softmax(std::vector<double>{std::log(2.0), 0.0});
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
  const auto a = softmax(std::vector<double>{5, 3, 1});
  const auto b = softmax(std::vector<double>{105, 103, 101});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, RandomLogitsSumToOneAndShift) {
  Rng rng = make_rng(7, "test.softmax");
  std::normal_distribution<double> n(0.0, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(1 + trial % 17);
    for (double& v : logits) v = n(rng);
    const double tau = 0.05 + std::abs(n(rng)) / 10.0;
    const auto p = softmax(logits, tau);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    const double shift = n(rng) * 100.0;
    for (double& v : logits) v += shift;
    const auto q = softmax(logits, tau);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  EXPECT_THROW(softmax(std::vector<double>{1.0, 2.0}, 0.0), Error);
}

TEST(CrossEntropy, CertainTargetIsZero) {
  EXPECT_DOUBLE_EQ(cross_entropy_mean({{1.0}}, std::vector<std::size_t>{0}), 0.0);
}

TEST(CrossEntropy, UniformOverFour) {
  EXPECT_NEAR(cross_entropy_mean({{0.25, 0.25, 0.25, 0.25}}, std::vector<std::size_t>{2}), 1.386294, 1e-6);
  EXPECT_NEAR(cross_entropy_mean({{0.25, 0.25, 0.25, 0.25}}, std::vector<std::size_t>{2}), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, TwoSamples) {
  const double l = cross_entropy_mean({{0.5, 0.5}, {0.25, 0.75}}, std::vector<std::size_t>{0, 0});
  EXPECT_NEAR(l, (std::log(2.0) + std::log(4.0)) / 2.0, 1e-15);
  EXPECT_NEAR(l, 1.039721, 1e-6);
}

TEST(CrossEntropy, TargetOutOfRange) {
  EXPECT_THROW(cross_entropy_mean({{0.5, 0.5}}, std::vector<std::size_t>{2}), IndexError);
}

TEST(CrossEntropy, ZeroProbabilityIsClamped) {
  const double l = cross_entropy_mean({{0.0, 1.0}}, std::vector<std::size_t>{0});
  EXPECT_NEAR(l, -std::log(kLogClamp), 1e-9);
}

TEST(Attention, SingleKeyReturnsValueRow) {
  const Tensor k = Tensor::matrix(1, 2, {0.3, -2.0});
  const Tensor v = Tensor::matrix(1, 2, {4.0, 5.0});
  const auto r = scaled_dot_attention(std::vector<double>{1.0, 7.0}, k, v);
  EXPECT_DOUBLE_EQ(r.output[0], 4.0);
  EXPECT_DOUBLE_EQ(r.output[1], 5.0);
}

TEST(Attention, IdenticalKeysAverageValues) {
  const Tensor k = Tensor::matrix(3, 2, {1, 2, 1, 2, 1, 2});
  const Tensor v = Tensor::matrix(3, 2, {1, 0, 2, 3, 6, 3});
  const auto r = scaled_dot_attention(std::vector<double>{0.5, -1.0}, k, v);
  EXPECT_NEAR(r.output[0], 3.0, 1e-15);
  EXPECT_NEAR(r.output[1], 2.0, 1e-15);
}

TEST(Attention, TwoKeyHandCase) {
  const Tensor k = Tensor::matrix(2, 2, {10, 0, 0, 10});
  const Tensor v = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const auto r = scaled_dot_attention(std::vector<double>{1.0, 0.0}, k, v);
  // Direct evaluation: weights e^a/(e^a+1), 1/(e^a+1) with a = 10/sqrt(2).
  const double a = 10.0 / std::sqrt(2.0);
  const double w0 = 1.0 / (1.0 + std::exp(-a));
  EXPECT_NEAR(r.output[0], w0, 1e-15);
  EXPECT_NEAR(r.output[1], 1.0 - w0, 1e-15);
}

TEST(Attention, JointRowPermutationInvariant) {
  Rng rng = make_rng(3, "test.attention");
  const Tensor k = random_matrix(5, 4, rng), v = random_matrix(5, 4, rng);
  const std::vector<double> q{0.3, -0.1, 2.0, 0.7};
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor kp({5, 4}), vp({5, 4});
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      kp.at(r, c) = k.at(perm[r], c);
      vp.at(r, c) = v.at(perm[r], c);
    }
  const auto a = scaled_dot_attention(q, k, v), b = scaled_dot_attention(q, kp, vp);
  double wsum = 0.0;
  for (double w : a.weights) {
    EXPECT_GE(w, 0.0);
    wsum += w;
  }
  EXPECT_NEAR(wsum, 1.0, 1e-12);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(a.output[c], b.output[c], 1e-12);
}

TEST(Attention, DimensionMismatch) {
  EXPECT_THROW(scaled_dot_attention(std::vector<double>{1.0}, Tensor({2, 2}), Tensor({2, 2})), ShapeError);
}

TEST(Autodiff, SquareGradient) {
  Var x(Tensor({1, 1}, 3.0), true);
  Tape tape;
  Var y = mul(x, x);
  tape.backward(y);
  ASSERT_TRUE(x.grad());
  EXPECT_DOUBLE_EQ((*x.grad())[0], 6.0);
}

TEST(Autodiff, SoftmaxCrossEntropyClosedForm) {
  Rng rng = make_rng(11, "test.ce");
  Var logits(random_matrix(3, 5, rng), true);
  const std::vector<std::size_t> targets{1, 4, 0};
  Tape tape;
  Var p = softmax_rows(logits, 1.0);
  Var loss = cross_entropy_mean(p, targets);
  tape.backward(loss);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      const double expected = (p.values()[r * 5 + c] - (c == targets[r] ? 1.0 : 0.0)) / 3.0;
      EXPECT_NEAR((*logits.grad())[r * 5 + c], expected, 1e-12);
    }
}

TEST(Autodiff, BackwardOnNonScalarThrows) {
  Var x(Tensor({2, 2}, 1.0), true);
  Tape tape;
  Var y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Autodiff, FrozenParametersGetNoGradient) {
  Var w(Tensor({2, 2}, 1.0), false);
  Var x(Tensor({1, 2}, 1.0), true);
  Tape tape;
  tape.backward(sum(matmul(x, w)));
  EXPECT_FALSE(w.grad());
  EXPECT_TRUE(x.grad());
}

TEST(Autodiff, NonFiniteValuesRaise) {
  Var x(Tensor({1, 1}, 800.0), true);
  Tape tape;
  EXPECT_THROW(exp(x), NumericError);
}

TEST(Autodiff, BackwardIsLinear) {
  Rng rng = make_rng(5, "test.linear");
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = random_matrix(3, 4, rng), w0 = random_matrix(4, 2, rng);
    const double a = u(rng), b = u(rng);
    auto graph = [&](Var& x, Var& w, int which) {
      Var h = gelu(matmul(x, w));
      Var l1 = sum(mul(h, h));
      Var l2 = sum(log(softmax_rows(h, 0.7)));
      return which == 1 ? l1 : which == 2 ? l2 : add(scale(l1, a), scale(l2, b));
    };
    std::vector<std::vector<double>> grads;
    for (int which = 1; which <= 3; ++which) {
      Var x(x0, true), w(w0, true);
      Tape tape;
      tape.backward(graph(x, w, which));
      std::vector<double> g = *x.grad();
      g.insert(g.end(), w.grad()->begin(), w.grad()->end());
      grads.push_back(g);
    }
    for (std::size_t i = 0; i < grads[0].size(); ++i)
      EXPECT_NEAR(grads[2][i], a * grads[0][i] + b * grads[1][i], 1e-10);
  }
}

TEST(GradCheck, QuadraticLinearModelIsExact) {
  ParameterStore store;
  Rng rng = make_rng(2, "test.gc");
  Var w = store.add("w", random_matrix(3, 2, rng));
  Var frozen = store.add("frozen", random_matrix(2, 2, rng), false);
  const Var x = constant(random_matrix(4, 3, rng));
  auto loss = [&] {
    Var y = matmul(matmul(x, w), frozen);
    return sum(mul(y, y));
  };
  const GradCheckReport r = finite_difference_check(store, loss, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-9);
  EXPECT_EQ(r.checked_scalars, 6u);
  EXPECT_EQ(r.scalars.count("frozen"), 0u);
}

TEST(GradCheck, FusedOpsMatchFiniteDifferences) {
  ParameterStore store;
  Rng rng = make_rng(4, "test.gc.ops");
  Var x = store.add("x", random_matrix(6, 8, rng));
  Var g = store.add("g", random_matrix(1, 8, rng, 0.3));
  Var b = store.add("b", random_matrix(1, 8, rng, 0.3));
  Var qkv_w = store.add("qkv", random_matrix(8, 24, rng, 0.3));
  Var t = store.add("t", random_matrix(3, 8, rng));
  auto loss = [&] {
    Var h = layer_norm(x, g, b);
    Var a = self_attention(matmul(h, qkv_w), 2, 3, 2, false);
    Var n = l2_normalize_rows(gelu(a));
    Var tn = l2_normalize_rows(t);
    Var s = softmax_rows(grouped_dot(n, tile_rows(tn, 6), 3), 0.5);
    return cross_entropy_mean(s, std::vector<std::size_t>{0, 2, 1, 1, 0, 2});
  };
  const GradCheckReport r = finite_difference_check(store, loss, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-7) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(GradCheck, RejectsNonPositiveStep) {
  ParameterStore store;
  store.add("w", Tensor({1, 1}, 1.0));
  EXPECT_THROW(finite_difference_check(store, [&] { return sum(store.at("w").var); }, 0.0), DomainError);
}
