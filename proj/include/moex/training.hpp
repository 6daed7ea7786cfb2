#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/config.hpp"
#include "moex/transformer.hpp"

namespace moex {

// Linear warmup to init_lr, cosine decay to min_lr at max_iters, then flat.
double lr_at(std::size_t iter, const TrainConfig& cfg);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;  // aligned with the parameter store
  std::uint64_t step = 0;

  static AdamState zeros_like(const ParamStore<T>& params);
  bool operator==(const AdamState&) const = default;
};

/// Decoupled weight decay on parameters flagged `decay`, then the
/// bias-corrected Adam update. A non-finite gradient aborts naming the
/// parameter before anything is modified.
template <typename T>
void adamw_step(ParamStore<T>& params, std::span<const Tensor<T>> grads, AdamState<T>& state, double lr,
                const TrainConfig& cfg);

// Rescales all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm. Returns g.
template <typename T>
double clip_global_norm(std::span<Tensor<T>> grads, double max_norm);

/// MoE parameters built from a dense model: every expert copies the dense
/// MLP matrices (biases dropped), other weights are copied verbatim, and
/// the linear router (when present) is freshly drawn from N(0, 0.02²).
template <typename T>
ParamStore<T> upcycle_from_dense(const ModelConfig& dense_cfg, const ParamStore<T>& dense, const ModelConfig& moe_cfg,
                                 std::uint64_t seed);

/// Random (seq + 1)-windows of a token stream: inputs are the first seq
/// ids, targets the next-token shift.
class WindowSampler {
 public:
  WindowSampler(std::span<const std::uint8_t> stream, std::size_t seq, std::uint64_t seed);

  void sample(std::size_t batch, std::vector<int>& inputs, std::vector<int>& targets);
  std::string rng_state() const;
  void set_rng_state(const std::string& state);

 private:
  std::span<const std::uint8_t> stream_;
  std::size_t seq_;
  std::mt19937_64 rng_;
};

struct StepResult {
  std::size_t iter = 0;
  double lr = 0;
  double loss = 0;          // loss_lm + λ·loss_balance
  double loss_lm = 0;
  double loss_balance = 0;  // summed over MoE layers, before λ
  double grad_norm = 0;
  std::vector<LayerRoutingStats> routing;
};

/// Single-process trainer over float parameters.
class Trainer {
 public:
  Trainer(ModelConfig model_cfg, TrainConfig train_cfg, ParamStore<float> params);
  Trainer(ModelConfig model_cfg, TrainConfig train_cfg);

  // One optimizer step on [batch × seq] inputs and their targets.
  StepResult step(std::span<const int> inputs, std::span<const int> targets, std::size_t batch, std::size_t seq);
  // Mean next-token loss without recording a tape.
  double eval_loss(std::span<const int> inputs, std::span<const int> targets, std::size_t batch,
                   std::size_t seq) const;

  std::size_t iter() const { return iter_; }
  const Model<float>& model() const { return model_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  const AdamState<float>& optimizer() const { return adam_; }
  void restore(std::size_t iter, AdamState<float> adam);

 private:
  Model<float> model_;
  TrainConfig train_cfg_;
  AdamState<float> adam_;
  std::size_t iter_ = 0;
};

struct Checkpoint {
  nlohmann::json config;  // flat run config
  std::uint64_t iter = 0;
  ParamStore<float> params;
  AdamState<float> adam;
  std::string rng;  // sampler state
};

// Magic "MOEXCKPT", u16 version, length-prefixed config JSON, u64 iter,
// u64 adam step, u32 tensor count, then per tensor: name, u8 dtype (0 =
// float32), u8 rank, u64 dims, raw little-endian data; finally the RNG blob.
// Tensors are the parameters, then "adam.m/<name>" and "adam.v/<name>".
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// A single MoE layer trained on a fixed teacher regression task, used for
/// routing trend checks.
struct ToyMoEConfig {
  std::size_t width = 16;
  std::size_t hidden = 32;
  std::size_t experts = 4;
  std::size_t top_k = 2;
  std::size_t tokens = 64;  // per step
  std::size_t steps = 500;
  RouterKind router = RouterKind::kTopkLinear;
  Activation activation = Activation::kRelu;
  double balance_lambda = 0.001;
  double lr = 3e-3;
  bool identical_experts = false;  // upcycled start: all experts equal
  std::uint64_t init_seed = 1;     // weights and teacher
  std::uint64_t data_seed = 2;     // token stream
};

struct ToyMoEResult {
  std::vector<double> fraction_std;  // per step, std of the expert token fractions
  std::vector<double> mean_l0;       // per step, mean ‖z‖₀ of selected experts
  double mean_fraction_std = 0;      // over all steps
  double final_l0 = 0;               // on a held-out batch after training
  double final_loss = 0;
};

ToyMoEResult run_toy_moe(const ToyMoEConfig& cfg);

}  // namespace moex
