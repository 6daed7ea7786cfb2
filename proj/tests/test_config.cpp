#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "moex/config.hpp"
#include "moex/error.hpp"
#include "moex/io.hpp"

using namespace moex;

TEST(RunConfig, DefaultsFollowPublishedTable) {
  const RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.model.n_layer, 8u);
  EXPECT_EQ(c.model.n_head, 8u);
  EXPECT_EQ(c.model.d_model, 512u);
  EXPECT_EQ(c.model.ctx_len, 1023u);
  EXPECT_EQ(c.model.moe.num_experts, 8u);
  EXPECT_EQ(c.model.moe.top_k, 2u);
  EXPECT_EQ(c.model.moe.balance_lambda, 0.001);
  EXPECT_EQ(c.train.init_lr, 3e-4);
  EXPECT_EQ(c.train.min_lr, 3e-5);
  EXPECT_EQ(c.train.warmup_iters, 2000u);
  EXPECT_EQ(c.train.max_iters, 600000u);
  EXPECT_EQ(c.train.batch_size, 100u);
  EXPECT_EQ(c.train.grad_clip, 1.0);
  EXPECT_EQ(c.interp.grid(), (std::vector<double>{0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}));
}

TEST(RunConfig, JsonRoundTripCoversEveryKey) {
  RunConfig c;
  c.model.mlp_kind = MlpKind::kMoE;
  c.model.moe.router = RouterKind::kTopkLinear;
  c.model.dense.topk_activation = 7;
  c.train.seed = 99;
  const auto j = to_json(c);
  EXPECT_EQ(j.size(), config_keys().size());
  const auto back = from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.model.moe.router, RouterKind::kTopkLinear);
  EXPECT_EQ(back.model.dense.topk_activation, std::optional<std::size_t>(7));
}

TEST(RunConfig, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(from_json({{"model.n_layers", 2}}), ConfigError);
  EXPECT_THROW(from_json({{"model.n_layer", "two"}}), ConfigError);
  EXPECT_THROW(from_json({{"model.n_layer", -1}}), ConfigError);
  EXPECT_THROW(from_json({{"moe.router", "hash"}}), ConfigError);
  EXPECT_THROW(from_json({{"model.mlp", "conv"}}), ConfigError);
  EXPECT_THROW(from_json(nlohmann::json::array()), ConfigError);
}

TEST(RunConfig, AssignmentsOverrideAndKeepWidthInSync) {
  RunConfig c;
  apply_assignment(c, "model.d_model=64");
  apply_assignment(c, "moe.router=topk_linear");
  apply_assignment(c, "train.init_lr=0.001");
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.model.moe.model_width, 64u);
  EXPECT_EQ(c.model.moe.router, RouterKind::kTopkLinear);
  EXPECT_EQ(c.train.init_lr, 0.001);
  EXPECT_THROW(apply_assignment(c, "model.d_model"), ConfigError);
  EXPECT_THROW(apply_assignment(c, "nope=1"), ConfigError);
}

TEST(RunConfig, FileThenFlagsPrecedence) {
  const auto dir = std::filesystem::temp_directory_path() / "moex_config_test";
  const std::string path = (dir / "run.json").string();
  io::write_file(path, R"({"model.n_layer": 2, "train.seed": 5})");
  RunConfig c = load_config(path);
  EXPECT_EQ(c.model.n_layer, 2u);
  apply_assignment(c, "model.n_layer=3");
  EXPECT_EQ(c.model.n_layer, 3u);
  io::write_file(path, R"({"model.depth": 2})");
  try {
    load_config(path);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.depth"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(Environment, SeedAndThreads) {
  RunConfig c;
  ::setenv("MOEX_SEED", "4242", 1);
  apply_environment(c);
  EXPECT_EQ(c.train.seed, 4242u);
  ::setenv("MOEX_SEED", "x1", 1);
  EXPECT_THROW(apply_environment(c), ConfigError);
  ::unsetenv("MOEX_SEED");
  ::unsetenv("MOEX_THREADS");
  EXPECT_EQ(thread_budget(), 1u);
  ::setenv("MOEX_THREADS", "3", 1);
  EXPECT_EQ(thread_budget(), 3u);
  ::unsetenv("MOEX_THREADS");
}
