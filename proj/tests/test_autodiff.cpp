#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "moex/autodiff.hpp"
#include "moex/error.hpp"
#include "moex/gradcheck.hpp"

#include "autodiff_cases.hpp"

using namespace moex;
using namespace opcases;

class EveryOp : public ::testing::TestWithParam<std::size_t> {};

TEST_P(EveryOp, PassesFiniteDifferencesAtTenPoints) {
  const auto cases = op_cases();
  const auto& c = cases[GetParam()];
  std::mt19937_64 rng(1000 + GetParam());
  for (int point = 0; point < 10; ++point) {
    TensorD x = away_from_zero(c.shape, rng);
    if (c.positive)
      for (auto& v : x.storage()) v = std::abs(v) + 0.1;
    EXPECT_LE(finite_difference_check(c.f, x), 1e-4) << c.name << " point " << point;
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, EveryOp, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(Backward, SquaredNormGradient) {
  Tape<double> tape;
  const auto xv = TensorD::vector({1.5, -2, 0.25});
  V x = tape.leaf(xv);
  tape.backward(sum(mul(x, x)));
  const auto g = tape.grad(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[i], 2 * xv[i]);
}

TEST(Backward, ReluMatmulChain) {
  std::mt19937_64 rng(8);
  const TensorD w = randn({6, 5}, rng);
  const ScalarFn f = [&](V x) { return sum(relu(linear(x, x.tape->constant(w)))); };
  // Nudge the point until no pre-activation sits near the kink.
  TensorD x = randn({2, 5}, rng);
  for (int tries = 0; tries < 100; ++tries) {
    const TensorD h = matmul_nt(x, w);
    bool near_kink = false;
    for (double v : h.storage()) near_kink |= std::abs(v) < 1e-3;
    if (!near_kink) break;
    x = randn({2, 5}, rng);
  }
  EXPECT_LE(finite_difference_check(f, x), 1e-5);
}

TEST(Backward, ReluSubgradientAtKink) {
  for (auto [x0, expected] : {std::pair{3.0, 1.0}, {-3.0, 0.0}, {0.0, 0.0}}) {
    Tape<double> tape;
    V x = tape.leaf(TensorD::vector({x0}));
    tape.backward(sum(relu(x)));
    EXPECT_EQ(tape.grad(x)[0], expected) << x0;
  }
  const ScalarFn f = [](V x) { return sum(relu(x)); };
  EXPECT_LE(finite_difference_check(f, TensorD::vector({3.0, -3.0})), 1e-7);
}

TEST(Backward, DetachedBranchHasZeroGradient) {
  Tape<double> tape;
  V x = tape.leaf(TensorD::vector({1, 2, 3}));
  V y = mul(detach(x), x);
  tape.backward(sum(y));
  const auto g = tape.grad(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[i], x.value()[i]);

  Tape<double> t2;
  V a = t2.leaf(TensorD::vector({1, 2}));
  t2.backward(sum(square(detach(a))));
  EXPECT_EQ(t2.grad(a), TensorD({2}, 0.0));
}

TEST(Backward, UnreachedLeafGetsZeros) {
  Tape<double> tape;
  V a = tape.leaf(TensorD::vector({1, 2}));
  V b = tape.leaf(TensorD::matrix({{3, 4}, {5, 6}}));
  tape.backward(sum(square(a)));
  EXPECT_EQ(tape.grad(b), TensorD({2, 2}, 0.0));
}

TEST(Backward, SeedMustBeScalarOnThisTape) {
  Tape<double> tape, other;
  V a = tape.leaf(TensorD::vector({1, 2}));
  EXPECT_THROW(tape.backward(square(a)), DimensionError);
  V foreign = other.leaf(TensorD::vector({1.0}));
  EXPECT_THROW(tape.backward(foreign), Error);
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  Tape<double> tape;
  V x = tape.leaf(TensorD::vector({2.0}));
  tape.backward(sum(add(scale(x, 3.0), square(x))));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 3.0 + 4.0);
}

TEST(Tape, VerificationModeRejectsNonFinite) {
  Tape<double> tape;
  V x = tape.leaf(TensorD::vector({1.0, 0.0}));
  EXPECT_THROW(div(x, x), NumericError);
  EXPECT_THROW(tape.leaf(TensorD::vector({std::nan("")})), NumericError);
}

TEST(Tape, NoRecordingWhenDisabled) {
  Tape<float> tape(false);
  tape.set_grad_enabled(false);
  Var<float> x = tape.leaf(TensorF::vector({1, 2}));
  Var<float> y = square(x);
  EXPECT_EQ(y.value(), TensorF::vector({1, 4}));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Attention, SingleTokenAttendsToItself) {
  Tape<double> tape;
  std::mt19937_64 rng(9);
  const TensorD qkv = randn({1, 12}, rng);
  V out = causal_attention(tape.constant(qkv), 1, 1, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.value()[i], qkv[8 + i]);
}

TEST(Attention, MatchesNaivePerPositionOracle) {
  std::mt19937_64 rng(10);
  const std::size_t batch = 2, seq = 5, d = 8, heads = 2, hd = d / heads;
  const TensorD qkv = randn({batch * seq, 3 * d}, rng);
  Tape<double> tape;
  const TensorD got = causal_attention(tape.constant(qkv), batch, seq, heads).value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < seq; ++t) {
        std::vector<double> w(t + 1);
        double mx = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0;
          for (std::size_t i = 0; i < hd; ++i) dot += qkv.at(b * seq + t, h * hd + i) * qkv.at(b * seq + s, d + h * hd + i);
          w[s] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, w[s]);
        }
        double z = 0;
        for (auto& v : w) z += (v = std::exp(v - mx));
        for (std::size_t i = 0; i < hd; ++i) {
          double acc = 0;
          for (std::size_t s = 0; s <= t; ++s) acc += w[s] / z * qkv.at(b * seq + s, 2 * d + h * hd + i);
          EXPECT_NEAR(got.at(b * seq + t, h * hd + i), acc, 1e-12);
        }
      }
}

TEST(Attention, FutureTokensDoNotLeak) {
  std::mt19937_64 rng(11);
  TensorD qkv = randn({6, 12}, rng);
  Tape<double> tape;
  const TensorD before = causal_attention(tape.constant(qkv), 1, 6, 2).value();
  for (std::size_t c = 0; c < 12; ++c) qkv.at(4, c) += 1.0;
  const TensorD after = causal_attention(tape.constant(qkv), 1, 6, 2).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(before.at(r, c), after.at(r, c));
}

TEST(GradCheck, ExactCasesAndErrors) {
  std::mt19937_64 rng(12);
  const ScalarFn sq = [](V x) { return sum(square(x)); };
  EXPECT_LE(finite_difference_check(sq, randn({7}, rng)), 1e-7);
  const ScalarFn constant = [](V x) { return sum(scale(x, 0.0)); };
  EXPECT_EQ(finite_difference_check(constant, randn({4}, rng)), 0.0);
  const ScalarFn blowup = [](V x) { return sum(div(x.tape->constant(TensorD::vector({1.0})), x)); };
  EXPECT_THROW(finite_difference_check(blowup, TensorD::vector({0.0})), NumericError);
}
