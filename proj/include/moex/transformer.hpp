#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "moex/autodiff.hpp"
#include "moex/moe.hpp"

namespace moex {

enum class MlpKind { kDense, kMoE };

struct DenseMlpConfig {
  double alpha = 4.0;  // hidden = alpha * d_model
  Activation activation = Activation::kGelu;
  std::optional<std::size_t> topk_activation;  // keep only the k largest hidden units
};

struct ModelConfig {
  std::size_t n_layer = 8;
  std::size_t n_head = 8;
  std::size_t d_model = 512;
  std::size_t vocab_size = 32;
  std::size_t ctx_len = 1023;
  MlpKind mlp_kind = MlpKind::kDense;
  DenseMlpConfig dense;
  MoEConfig moe;
  double dropout = 0.0;

  std::size_t dense_hidden() const;
  // Width of the harvested hidden representation: α·d (dense) or M·D (MoE).
  std::size_t hidden_width() const;
  // Weight-matrix parameters touched per token by one MLP slot.
  std::size_t active_mlp_params() const;
  void validate() const;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool decay = false;  // weight decay applies to matrices only
};

template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(std::string name, Tensor<T> value, bool decay);
  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const;
  Tensor<T>& at(const std::string& name) { return params_[index_of(name)].value; }
  const Tensor<T>& at(const std::string& name) const { return params_[index_of(name)].value; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t numel() const;

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct LayerRoutingStats {
  std::vector<double> token_fraction;
  double mean_selected_l0 = 0;
};

struct ForwardOptions {
  std::optional<std::size_t> trace_layer;  // capture this layer's MLP hidden
  bool trace_gate_scores = false;          // also keep the traced layer's raw router scores
};

template <typename T>
struct ForwardPass {
  Var<T> logits;                       // [B·T × V]
  std::optional<Var<T>> balance_loss;  // summed over MoE layers
  std::vector<Var<T>> params;          // aligned with ParamStore order
  std::vector<LayerRoutingStats> routing;  // one per MoE layer
  Tensor<T> trace;                     // [B·T × hidden_width] when requested
  Tensor<T> trace_scores;              // [B·T × M] when requested
};

/// GPT-2 style causal LM with a pluggable MLP slot: pre-norm blocks, learned
/// absolute positions, untied output head.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(ModelConfig cfg, ParamStore<T> params);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // tokens holds `batch` rows of `seq` ids.
  ForwardPass<T> forward(Tape<T>& tape, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                         const ForwardOptions& opts = {}) const;

  // Evaluation-mode logits for one sequence, no gradient recording.
  Tensor<T> logits(std::span<const int> tokens) const;

  // Rows of layer `layer`'s MLP hidden (dense) or scaled code (MoE) at the
  // given positions of one sequence, evaluation mode.
  Tensor<T> harvest_hidden(std::span<const int> tokens, std::size_t layer, std::span<const std::size_t> positions) const;

 private:
  void check_tokens(std::span<const int> tokens, std::size_t seq) const;

  ModelConfig cfg_;
  ParamStore<T> params_;
};

// Expected parameter names and shapes for a config, in store order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg);

}  // namespace moex
