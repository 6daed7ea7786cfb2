#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "moex/error.hpp"
#include "moex/kernels.hpp"

using namespace moex;

namespace {

TensorD random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  TensorD t({r, c});
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

TensorD triple_loop(const TensorD& a, const TensorD& b) {
  TensorD c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0;
      for (std::size_t t = 0; t < a.dim(1); ++t) s += a.at(i, t) * b.at(t, j);
      c.at(i, j) = s;
    }
  return c;
}

double max_rel(const TensorD& a, const TensorD& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-300));
  return worst;
}

// Positive-term series: erf(x) = 2/√π · e^{-x²} · Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1)).
long double erf_series(long double x) {
  long double term = x, sum = x;
  for (int n = 1; n < 400; ++n) {
    term *= 2 * x * x / (2 * n + 1);
    sum += term;
    if (term < sum * 1e-21L) break;
  }
  return 2 / std::sqrt(std::numbers::pi_v<long double>) * std::exp(-x * x) * sum;
}

}  // namespace

TEST(Matmul, IdentityAndOrthogonalPick) {
  const auto eye = TensorD::matrix({{1, 0}, {0, 1}});
  const auto m = TensorD::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(eye, m), m);
  EXPECT_EQ(matmul(TensorD::matrix({{1, 0}}), TensorD::matrix({{0}, {5}})), TensorD::matrix({{0}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(1);
  const auto a = random_matrix(5, 7, rng);
  const auto b = random_matrix(7, 3, rng);
  EXPECT_LE(max_rel(matmul(a, b), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, TransposedVariantsAgree) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 16);
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    const auto a = random_matrix(m, k, rng);
    const auto b = random_matrix(k, n, rng);
    const auto ref = triple_loop(a, b);
    EXPECT_LE(max_rel(matmul_nt(a, transpose(b)), ref), 1e-12);
    EXPECT_LE(max_rel(matmul_tn(transpose(a), b), ref), 1e-12);
  }
}

TEST(Matmul, AssociativeWithOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 16);
    const std::size_t p = dim(rng), q = dim(rng), r = dim(rng), s = dim(rng);
    const auto a = random_matrix(p, q, rng), b = random_matrix(q, r, rng), c = random_matrix(r, s, rng);
    const auto lhs = matmul(matmul(a, b), c);
    const auto rhs = triple_loop(a, triple_loop(b, c));
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-10 * std::max(1.0, std::abs(rhs[i])));
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(TensorD({2, 3}), TensorD({4, 5}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4x5]"), std::string::npos);
  }
}

TEST(Activation, ReluAndGeluPoints) {
  EXPECT_EQ(activation(TensorD::vector({-1, 0, 2}), Activation::kRelu), TensorD::vector({0, 0, 2}));
  EXPECT_EQ(gelu_scalar(0.0), 0.0);
  EXPECT_NEAR(gelu_scalar(1.0), 1.0 * 0.5 * (1 + std::erf(1 / std::sqrt(2.0))), 1e-15);
  EXPECT_NEAR(gelu_scalar(-3.0), -3.0 * normal_cdf(-3.0), 1e-15);
}

TEST(Activation, ParseNames) {
  EXPECT_EQ(parse_activation("relu"), Activation::kRelu);
  EXPECT_EQ(parse_activation("gelu"), Activation::kGelu);
  EXPECT_EQ(activation_name(Activation::kGelu), "gelu");
  EXPECT_THROW(parse_activation("swish"), ConfigError);
}

TEST(Activation, GeluDerivativeMatchesDifferences) {
  for (double x : {-4.0, -1.3, -0.2, 0.0, 0.7, 2.5}) {
    const double h = 1e-6;
    const double fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2 * h);
    EXPECT_NEAR(gelu_grad_scalar(x), fd, 1e-8) << x;
  }
}

TEST(TopK, Examples) {
  const std::vector<double> x{3, 1, 2};
  auto r = topk_values<double>(x, 2);
  EXPECT_EQ(r.values, (std::vector<double>{3, 2}));
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 2}));
  const std::vector<double> tie{5, 5, 1};
  r = topk_values<double>(tie, 1);
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0}));
  EXPECT_THROW(topk_values<double>(x, 0), DimensionError);
  EXPECT_THROW(topk_values<double>(x, 4), DimensionError);
}

TEST(TopK, FullKIsDescendingPermutation) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> v(0, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(9);
    for (auto& e : x) e = v(rng);
    const auto r = topk_values<double>(x, x.size());
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] > x[b]; });
    EXPECT_EQ(r.indices, order);
  }
}

TEST(Softmax, UniformStableAndMonotone) {
  const auto uniform = softmax(TensorD::vector({2, 2, 2}));
  for (double p : uniform.storage()) EXPECT_NEAR(p, 1.0 / 3, 1e-15);
  const auto big = softmax(TensorD::vector({1000, 0}));
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_matrix(1, 11, rng).reshaped({11});
    const auto p = softmax(x);
    double s = 0;
    for (double e : p.storage()) s += e;
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_EQ(std::max_element(p.storage().begin(), p.storage().end()) - p.storage().begin(),
              std::max_element(x.storage().begin(), x.storage().end()) - x.storage().begin());
  }
}

TEST(Erf, MatchesSeriesOracle) {
  EXPECT_EQ(erf(TensorD::vector({0.0}))[0], 0.0);
  EXPECT_NEAR(erf(TensorD::vector({1 / std::sqrt(2.0)}))[0], 0.682689492137086, 1e-12);
  EXPECT_NEAR(erf(TensorD::vector({6.0}))[0], 1.0, 1e-12);
  for (double x = 0.0; x <= 6.0; x += 0.05) {
    const double ref = static_cast<double>(erf_series(x));
    EXPECT_NEAR(erf(TensorD::vector({x}))[0], ref, 1e-7) << x;
  }
}

TEST(Erf, OddMonotoneBounded) {
  double prev = -2;
  for (double x = -8; x <= 8; x += 0.01) {
    const double v = erf(TensorD::vector({x}))[0];
    EXPECT_EQ(v, -erf(TensorD::vector({-x}))[0]);
    EXPECT_GE(v, prev);
    EXPECT_LE(std::abs(v), 1.0);
    prev = v;
  }
  EXPECT_LT(std::abs(erf(TensorD::vector({2.0}))[0]), 1.0);
}

TEST(LayerNorm, ConstantInputGivesBias) {
  const auto x = TensorD::vector({3, 3, 3, 3});
  const auto g = TensorD::vector({2, 2, 2, 2});
  const auto b = TensorD::vector({0.5, -1, 0, 4});
  EXPECT_EQ(layer_norm(x, g, b), b);
}

TEST(LayerNorm, StandardizesRows) {
  std::mt19937_64 rng(6);
  const auto x = random_matrix(4, 32, rng);
  const auto y = layer_norm(x, TensorD({32}, 1.0), TensorD({32}, 0.0));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (double e : y.row(r)) m += e;
    m /= 32;
    for (double e : y.row(r)) v += (e - m) * (e - m);
    v /= 32;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(CrossEntropy, AnalyticCases) {
  const std::vector<int> t{3};
  TensorD peaked({1, 8}, 0.0);
  peaked.at(0, 3) = 1000;
  EXPECT_NEAR(cross_entropy(peaked, std::span<const int>(t)), 0.0, 1e-12);
  const std::vector<int> t4{0, 5, 31, 7};
  EXPECT_NEAR(cross_entropy(TensorD({4, 32}, 0.25), std::span<const int>(t4)), std::log(32.0), 1e-12);
  const std::vector<int> bad{32};
  EXPECT_THROW(cross_entropy(TensorD({1, 32}), std::span<const int>(bad)), DimensionError);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  std::mt19937_64 rng(7);
  const auto logits = random_matrix(6, 10, rng);
  const std::vector<int> t{0, 9, 3, 3, 7, 1};
  double ref = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0;
    for (double v : logits.row(i)) z += std::exp(v);
    ref += -(logits.at(i, static_cast<std::size_t>(t[i])) - std::log(z));
  }
  ref /= 6;
  const double got = cross_entropy(logits, std::span<const int>(t));
  EXPECT_NEAR(got, ref, 1e-12);
  EXPECT_GE(got, 0.0);
}
