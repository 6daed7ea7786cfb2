#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "moex/error.hpp"
#include "moex/io.hpp"
#include "moex/pgn.hpp"
#include "moex/training.hpp"

using namespace moex;

namespace {

ModelConfig tiny_dense() {
  ModelConfig c;
  c.n_layer = 2;
  c.n_head = 2;
  c.d_model = 16;
  c.ctx_len = 32;
  c.dense.alpha = 1.0;
  c.dense.activation = Activation::kRelu;
  return c;
}

ModelConfig tiny_moe(std::size_t m = 4, std::size_t k = 2, RouterKind r = RouterKind::kSparsityAware) {
  ModelConfig c = tiny_dense();
  c.mlp_kind = MlpKind::kMoE;
  c.moe.num_experts = m;
  c.moe.top_k = k;
  c.moe.expert_hidden = 16;
  c.moe.model_width = 16;
  c.moe.router = r;
  return c;
}

TrainConfig quick_train() {
  TrainConfig t;
  t.init_lr = 3e-3;
  t.min_lr = 3e-4;
  t.warmup_iters = 10;
  t.max_iters = 200;
  t.batch_size = 4;
  return t;
}

std::vector<std::uint8_t> corpus_stream(std::size_t games, std::uint64_t seed) {
  std::string text;
  for (const auto& l : chess::generate_games(games, seed, 400)) text += l;
  return chess::tokenize(text, chess::movetext_vocab());
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("moex_training_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Schedule, PublishedDefaults) {
  const TrainConfig t;
  EXPECT_EQ(lr_at(t.warmup_iters, t), 3e-4);
  EXPECT_EQ(lr_at(t.max_iters, t), 3e-5);
  EXPECT_EQ(lr_at(t.max_iters + 10, t), 3e-5);
  EXPECT_EQ(lr_at(0, t), 0.0);
  const std::size_t mid = t.warmup_iters + (t.max_iters - t.warmup_iters) / 2;
  EXPECT_NEAR(lr_at(mid, t), 1.65e-4, 1e-9);
  EXPECT_NEAR(lr_at(t.warmup_iters / 2, t), 1.5e-4, 1e-15);
}

TEST(Schedule, ContinuousAtBoundariesAndMonotonePieces) {
  TrainConfig t;
  t.warmup_iters = 100000;
  t.max_iters = 10000000;
  EXPECT_NEAR(lr_at(t.warmup_iters - 1, t), lr_at(t.warmup_iters, t), 1e-8);
  EXPECT_NEAR(lr_at(t.max_iters - 1, t), lr_at(t.max_iters, t), 1e-12);
  const TrainConfig d;
  for (std::size_t i = 1; i <= d.warmup_iters; ++i) EXPECT_GT(lr_at(i, d), lr_at(i - 1, d));
  for (std::size_t i = d.warmup_iters + 1; i <= d.max_iters; i += 997) EXPECT_LE(lr_at(i, d), lr_at(i - 1, d));
}

TEST(Schedule, ConfigValidation) {
  TrainConfig t;
  t.min_lr = 1e-3;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.warmup_iters = t.max_iters;
  EXPECT_THROW(t.validate(), ConfigError);
}

namespace {

ParamStore<double> single(const std::string& name, TensorD v, bool decay) {
  ParamStore<double> s;
  s.add(name, std::move(v), decay);
  return s;
}

}  // namespace

TEST(AdamW, ZeroGradientWithoutDecayLeavesParams) {
  auto p = single("w", TensorD::vector({1, -2, 3}), true);
  auto state = AdamState<double>::zeros_like(p);
  TrainConfig cfg;
  cfg.weight_decay = 0;
  const std::vector<TensorD> g{TensorD({3}, 0.0)};
  adamw_step(p, std::span<const TensorD>(g), state, 1e-2, cfg);
  EXPECT_EQ(p.at("w"), TensorD::vector({1, -2, 3}));
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, FirstStepMovesByLearningRateTowardZero) {
  auto p = single("w", TensorD::vector({1.0}), false);
  auto state = AdamState<double>::zeros_like(p);
  TrainConfig cfg;
  const std::vector<TensorD> g{TensorD::vector({2.0})};  // d/dw w² at 1
  adamw_step(p, std::span<const TensorD>(g), state, 0.1, cfg);
  // Bias-corrected moments give m̂/√v̂ = g/|g|.
  EXPECT_NEAR(p.at("w")[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-12);
}

TEST(AdamW, DecayOnlyOnFlaggedParameters) {
  ParamStore<double> p;
  p.add("matrix", TensorD({1, 1}, 2.0), true);
  p.add("gain", TensorD({1}, 2.0), false);
  auto state = AdamState<double>::zeros_like(p);
  TrainConfig cfg;
  const std::vector<TensorD> g{TensorD({1, 1}, 0.0), TensorD({1}, 0.0)};
  adamw_step(p, std::span<const TensorD>(g), state, 0.5, cfg);
  EXPECT_DOUBLE_EQ(p.at("matrix")[0], 2.0 * (1 - 0.5 * 0.1));
  EXPECT_EQ(p.at("gain")[0], 2.0);
}

TEST(AdamW, ReachesMinimumOfQuadratic) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  TensorD w({5});
  for (auto& v : w.storage()) v = n(rng);
  // Decoupled decay does the last stretch: Adam's sign-like steps alone
  // stall near lr·sqrt(5) as the cosine tail shrinks.
  auto p = single("w", w, true);
  auto state = AdamState<double>::zeros_like(p);
  TrainConfig cfg;
  cfg.init_lr = 0.3;
  cfg.min_lr = 1e-6;
  cfg.warmup_iters = 0;
  cfg.max_iters = 100;
  cfg.weight_decay = 0.5;
  for (std::size_t it = 0; it < 100; ++it) {
    TensorD g = p.at("w");
    for (auto& v : g.storage()) v *= 2;
    const std::vector<TensorD> grads{g};
    adamw_step(p, std::span<const TensorD>(grads), state, lr_at(it, cfg), cfg);
  }
  double norm = 0;
  for (double v : p.at("w").storage()) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-3);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  auto p = single("h0.mlp.c_fc.w", TensorD({2}, 1.0), true);
  auto state = AdamState<double>::zeros_like(p);
  const std::vector<TensorD> g{TensorD::vector({1.0, std::nan("")})};
  try {
    adamw_step(p, std::span<const TensorD>(g), state, 0.1, TrainConfig{});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("h0.mlp.c_fc.w"), std::string::npos);
  }
  EXPECT_EQ(p.at("h0.mlp.c_fc.w"), TensorD({2}, 1.0));
}

TEST(Clip, BelowAndAboveThreshold) {
  std::vector<TensorD> small{TensorD::vector({0.3, 0.4})};
  EXPECT_DOUBLE_EQ(clip_global_norm(std::span<TensorD>(small), 1.0), 0.5);
  EXPECT_EQ(small[0], TensorD::vector({0.3, 0.4}));
  std::vector<TensorD> big{TensorD::vector({0.0, 4.0 * 0.6}), TensorD::vector({4.0 * 0.8})};
  EXPECT_DOUBLE_EQ(clip_global_norm(std::span<TensorD>(big), 1.0), 4.0);
  double sq = 0;
  for (const auto& t : big)
    for (double v : t.storage()) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-15);
  EXPECT_NEAR(big[0][1] / big[1][0], 0.6 / 0.8, 1e-15);
  EXPECT_THROW(clip_global_norm(std::span<TensorD>(big), 0.0), ConfigError);
}

TEST(Upcycle, ExpertsCopyDenseAndOtherWeightsMatch) {
  const Model<float> dense(tiny_dense(), 3);
  const auto cfg = tiny_moe(4, 2, RouterKind::kTopkLinear);
  const auto store = upcycle_from_dense(dense.config(), dense.params(), cfg, 9);
  const Model<float> moe(cfg, store);
  for (const auto& p : store) {
    if (p.name.find(".moe.") == std::string::npos) {
      EXPECT_EQ(p.value, dense.params().at(p.name)) << p.name;
    } else if (p.name.ends_with(".w_enc")) {
      EXPECT_EQ(p.value, dense.params().at(p.name.substr(0, 2) + ".mlp.c_fc.w")) << p.name;
    } else if (p.name.ends_with(".w_dec")) {
      EXPECT_EQ(p.value, dense.params().at(p.name.substr(0, 2) + ".mlp.c_proj.w")) << p.name;
    }
  }
  EXPECT_EQ(store.at("h1.moe.e0.w_enc"), store.at("h1.moe.e3.w_enc"));
  EXPECT_EQ(store.at("h1.moe.e1.w_dec"), store.at("h1.moe.e2.w_dec"));
}

TEST(Upcycle, MismatchedHiddenNamesBothSizes) {
  const Model<float> dense(tiny_dense(), 3);
  auto cfg = tiny_moe();
  cfg.moe.expert_hidden = 24;
  try {
    upcycle_from_dense(dense.config(), dense.params(), cfg, 1);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("16"), std::string::npos) << msg;
    EXPECT_NE(msg.find("24"), std::string::npos) << msg;
  }
  auto layers = tiny_moe();
  layers.n_layer = 3;
  EXPECT_THROW(upcycle_from_dense(dense.config(), dense.params(), layers, 1), ConfigError);
}

TEST(Upcycle, AllExpertsSelectedReproducesDenseWithoutBiases) {
  std::mt19937_64 rng(4);
  Model<double> dense(tiny_dense(), 5);
  std::normal_distribution<double> n(0.0, 0.2);
  for (auto& p : dense.params()) {
    for (auto& v : p.value.storage()) v += n(rng);
    if (p.name.find("mlp.c_fc.b") != std::string::npos || p.name.find("mlp.c_proj.b") != std::string::npos)
      p.value.fill(0.0);
  }
  std::uniform_int_distribution<int> id(0, 31);
  std::vector<int> tokens(20);
  for (auto& t : tokens) t = id(rng);
  for (RouterKind r : {RouterKind::kTopkLinear, RouterKind::kSparsityAware}) {
    const auto cfg = tiny_moe(4, 4, r);
    const Model<double> moe(cfg, upcycle_from_dense(dense.config(), dense.params(), cfg, 6));
    const auto a = dense.logits(tokens), b = moe.logits(tokens);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
  }
}

TEST(Sampler, DeterministicWindowsAndStateRoundTrip) {
  const auto stream = corpus_stream(10, 1);
  WindowSampler a(stream, 16, 3), b(stream, 16, 3);
  std::vector<int> ia, ta, ib, tb;
  a.sample(4, ia, ta);
  b.sample(4, ib, tb);
  EXPECT_EQ(ia, ib);
  for (std::size_t i = 0; i + 1 < 16; ++i) EXPECT_EQ(ta[i], ia[i + 1]);
  const auto state = a.rng_state();
  a.sample(4, ia, ta);
  b.set_rng_state(state);
  b.sample(4, ib, tb);
  EXPECT_EQ(ia, ib);
  const std::vector<std::uint8_t> tiny(5, 0);
  EXPECT_THROW(WindowSampler(tiny, 16, 1), Error);
}

TEST(TrainStep, ZeroLambdaLossIsLmLoss) {
  auto cfg = tiny_moe();
  cfg.moe.balance_lambda = 0;
  Trainer tr(cfg, quick_train());
  const auto stream = corpus_stream(10, 2);
  WindowSampler s(stream, 16, 1);
  std::vector<int> in, tg;
  s.sample(2, in, tg);
  const auto r = tr.step(in, tg, 2, 16);
  EXPECT_EQ(r.loss, r.loss_lm);
  EXPECT_GT(r.loss_balance, 0.0);
  EXPECT_EQ(r.routing.size(), 2u);
}

TEST(TrainStep, DenseModelHasNoBalanceTerm) {
  Trainer tr(tiny_dense(), quick_train());
  const auto stream = corpus_stream(10, 2);
  WindowSampler s(stream, 16, 1);
  std::vector<int> in, tg;
  s.sample(2, in, tg);
  const auto r = tr.step(in, tg, 2, 16);
  EXPECT_EQ(r.loss_balance, 0.0);
  EXPECT_EQ(r.loss, r.loss_lm);
  EXPECT_TRUE(r.routing.empty());
  EXPECT_EQ(tr.iter(), 1u);
}

TEST(TrainStep, LambdaWeightsBalanceTerm) {
  auto cfg = tiny_moe();
  cfg.moe.balance_lambda = 0.5;
  Trainer tr(cfg, quick_train());
  const auto stream = corpus_stream(10, 2);
  WindowSampler s(stream, 16, 1);
  std::vector<int> in, tg;
  s.sample(2, in, tg);
  const auto r = tr.step(in, tg, 2, 16);
  EXPECT_NEAR(r.loss, r.loss_lm + 0.5 * r.loss_balance, 1e-5);
}

TEST(TrainStep, SmokeTrainDropsBelowUniformLoss) {
  const auto stream = corpus_stream(1000, 3);
  auto cfg = tiny_dense();
  cfg.d_model = 32;
  cfg.n_head = 4;
  Trainer tr(cfg, quick_train());
  WindowSampler s(stream, 32, 4);
  std::vector<int> in, tg;
  double last = 0;
  for (int i = 0; i < 200; ++i) {
    s.sample(4, in, tg);
    last = tr.step(in, tg, 4, 32).loss_lm;
  }
  s.sample(16, in, tg);
  EXPECT_LT(tr.eval_loss(in, tg, 16, 32), std::log(32.0));
  EXPECT_LT(last, std::log(32.0));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Trainer tr(tiny_moe(), quick_train());
  const auto stream = corpus_stream(10, 5);
  WindowSampler s(stream, 16, 1);
  std::vector<int> in, tg;
  for (int i = 0; i < 3; ++i) {
    s.sample(2, in, tg);
    tr.step(in, tg, 2, 16);
  }
  Checkpoint c{nlohmann::json{{"model.n_layer", 2}}, tr.iter(), tr.model().params(), tr.optimizer(), s.rng_state()};
  const auto dir = scratch_dir("bytes");
  const std::string path = (dir / "a.ckpt").string();
  save_checkpoint(path, c);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(encode_checkpoint(loaded), io::read_file(path));
  EXPECT_EQ(loaded.iter, 3u);
  EXPECT_EQ(loaded.adam, tr.optimizer());
  for (std::size_t i = 0; i < loaded.params.size(); ++i) {
    EXPECT_EQ(loaded.params[i].name, tr.model().params()[i].name);
    EXPECT_EQ(loaded.params[i].value, tr.model().params()[i].value);
    EXPECT_EQ(loaded.params[i].decay, tr.model().params()[i].decay);
  }
  EXPECT_EQ(loaded.rng, s.rng_state());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsReportedWithFileName) {
  Trainer tr(tiny_dense(), quick_train());
  Checkpoint c{nlohmann::json::object(), 0, tr.model().params(), tr.optimizer(), "x"};
  const auto dir = scratch_dir("corrupt");
  const std::string path = (dir / "bad.ckpt").string();
  std::string bytes = encode_checkpoint(c);
  bytes[0] = 'X';
  io::write_file(path, bytes);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
  }
  io::write_file(path, encode_checkpoint(c).substr(0, 200));
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto stream = corpus_stream(20, 6);
  const auto cfg = tiny_moe();
  const auto tc = quick_train();
  std::vector<int> in, tg;

  Trainer straight(cfg, tc);
  WindowSampler s1(stream, 16, 11);
  std::vector<double> expected;
  for (int i = 0; i < 6; ++i) {
    s1.sample(2, in, tg);
    expected.push_back(straight.step(in, tg, 2, 16).loss);
  }

  std::vector<double> got;
  const auto dir = scratch_dir("resume");
  const std::string path = (dir / "mid.ckpt").string();
  {
    Trainer first(cfg, tc);
    WindowSampler s2(stream, 16, 11);
    for (int i = 0; i < 3; ++i) {
      s2.sample(2, in, tg);
      got.push_back(first.step(in, tg, 2, 16).loss);
    }
    save_checkpoint(path, {nlohmann::json::object(), first.iter(), first.model().params(), first.optimizer(),
                           s2.rng_state()});
  }
  auto ck = load_checkpoint(path);
  Trainer resumed(cfg, tc, ck.params);
  resumed.restore(ck.iter, ck.adam);
  WindowSampler s3(stream, 16, 999);
  s3.set_rng_state(ck.rng);
  for (int i = 0; i < 3; ++i) {
    s3.sample(2, in, tg);
    got.push_back(resumed.step(in, tg, 2, 16).loss);
  }
  EXPECT_EQ(got, expected);
  std::filesystem::remove_all(dir);
}

TEST(ToyMoE, DeterministicAndBalanceLossSpreadsUpcycledRouting) {
  ToyMoEConfig c;
  c.router = RouterKind::kSparsityAware;
  c.identical_experts = true;
  c.steps = 150;
  c.balance_lambda = 0;
  const auto off = run_toy_moe(c);
  EXPECT_EQ(run_toy_moe(c).fraction_std, off.fraction_std);
  c.balance_lambda = 0.001;
  const auto on = run_toy_moe(c);
  EXPECT_LT(on.mean_fraction_std, off.mean_fraction_std);
}

TEST(ToyMoE, ReluExpertsSparserThanGelu) {
  ToyMoEConfig c;
  c.steps = 100;
  c.activation = Activation::kRelu;
  const auto relu = run_toy_moe(c);
  c.activation = Activation::kGelu;
  const auto gelu = run_toy_moe(c);
  EXPECT_LT(relu.final_l0, gelu.final_l0);
  EXPECT_NEAR(gelu.final_l0, double(c.hidden), 0.5);
}
