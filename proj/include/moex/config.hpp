#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/transformer.hpp"

namespace moex {

struct TrainConfig {
  double init_lr = 3e-4;
  double min_lr = 3e-5;
  std::size_t warmup_iters = 2000;
  std::size_t max_iters = 600000;
  std::size_t batch_size = 100;
  double grad_clip = 1.0;
  std::uint64_t seed = 1337;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 4;
  std::size_t ckpt_interval = 1000;

  void validate() const;
};

struct InterpConfig {
  std::size_t min_fire = 5;
  double min_precision = 0.95;
  double train_fraction = 0.8;
  std::size_t grid_points = 10;  // thresholds i / grid_points for i < grid_points

  std::vector<double> grid() const;
  void validate() const;
};

/// Every tunable of a run. Serialized as one JSON object with flat dotted
/// keys such as "model.n_layer"; unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  InterpConfig interp;
  double val_fraction = 0.01;  // games held out at ingest

  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
// Starts from `base` and applies each key of `flat`.
RunConfig from_json(const nlohmann::json& flat, RunConfig base = {});
// One "key=value" assignment; the value is parsed as JSON, falling back to a
// bare string.
void apply_assignment(RunConfig& cfg, const std::string& assignment);
// MOEX_SEED, when set, replaces train.seed.
void apply_environment(RunConfig& cfg);
std::vector<std::string> config_keys();

// Reads a config file: a JSON object with flat dotted keys.
RunConfig load_config(const std::string& path, RunConfig base = {});

// Worker cap from MOEX_THREADS, default 1.
unsigned thread_budget();

}  // namespace moex
