#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "moex/autodiff.hpp"
#include "moex/kernels.hpp"
#include "moex/tensor.hpp"

namespace moex {

enum class RouterKind { kTopkLinear, kSparsityAware, kBruteforceL0 };

RouterKind parse_router(std::string_view name);
std::string_view router_name(RouterKind r);

// Variance floor applied before the square root in the sparsity estimate.
inline constexpr double kVarianceFloor = 1e-12;

struct MoEConfig {
  std::size_t num_experts = 8;      // M
  std::size_t top_k = 2;            // k
  std::size_t expert_hidden = 2048; // D
  std::size_t model_width = 512;    // d
  RouterKind router = RouterKind::kSparsityAware;
  Activation activation = Activation::kRelu;
  double balance_lambda = 0.001;
  // Use the variance itself (not its square root) as the erf denominator.
  bool literal_variance = false;
  // Cut the gradient path from the router statistics back into W_enc.
  bool detach_router = false;

  void validate() const;
};

/// One expert: z = act(W_enc·x), y = W_dec·z. No biases.
template <typename T>
struct ExpertParams {
  Tensor<T> w_enc;  // [D×d]
  Tensor<T> w_dec;  // [d×D]

  std::size_t hidden() const { return w_enc.dim(0); }
  std::size_t width() const { return w_enc.dim(1); }
};

/// Column-wise statistics of W_enc, always derived, never trained.
template <typename T>
struct RouterStats {
  Tensor<T> mu;   // [d]
  Tensor<T> var;  // [d], population variance
};

template <typename T>
struct GateDecision {
  Tensor<T> weights;                  // [M], zero outside `selected`
  std::vector<std::size_t> selected;  // k indices, descending score
  Tensor<T> raw_scores;               // [M]
};

template <typename T>
struct ExpertOutput {
  Tensor<T> h;  // [D] pre-activation
  Tensor<T> z;  // [D]
  Tensor<T> y;  // [d]
};

template <typename T>
ExpertOutput<T> expert_forward(const Tensor<T>& x, const ExpertParams<T>& e, Activation act);

// Top-k over raw scores, softmax over the selected ones.
template <typename T>
GateDecision<T> gate_from_scores(Tensor<T> raw_scores, std::size_t k);

template <typename T>
GateDecision<T> topk_linear_gate(const Tensor<T>& x, const Tensor<T>& w_gate, std::size_t k);

template <typename T>
RouterStats<T> compute_router_stats(const ExpertParams<T>& e);

template <typename T>
struct PreactivationMoments {
  T mean;      // μ_h = muᵀx
  T variance;  // max(varᵀx², floor)
  T stddev;    // σ_h = sqrt(variance)
};

template <typename T>
PreactivationMoments<T> preactivation_moments(const Tensor<T>& x, const RouterStats<T>& stats);

// D·Φ(μ_h/σ_h): expected count of positive pre-activations under the
// column-Gaussian model of W_enc.
template <typename T>
T estimate_expected_l0(const Tensor<T>& x, const RouterStats<T>& stats, std::size_t hidden);

// Score per expert: -erf(μ_h / (√2·σ_h)). Higher means sparser.
template <typename T>
T sparsity_score(const Tensor<T>& x, const RouterStats<T>& stats, bool literal_variance = false);

template <typename T>
GateDecision<T> sparsity_aware_gate(const Tensor<T>& x, std::span<const RouterStats<T>> stats, std::size_t k,
                                    bool literal_variance = false);

template <typename T>
std::size_t exact_l0(const Tensor<T>& x, const ExpertParams<T>& e);

template <typename T>
GateDecision<T> bruteforce_l0_gate(const Tensor<T>& x, std::span<const ExpertParams<T>> experts, std::size_t k);

template <typename T>
struct MoEOutput {
  Tensor<T> y;                              // [d]
  std::map<std::size_t, Tensor<T>> expert_z; // post-activation z(j) for selected j only
};

/// Weighted sum over selected experts. `expert_calls`, when given, is
/// incremented per evaluated expert.
template <typename T>
MoEOutput<T> moe_forward(const Tensor<T>& x, std::span<const ExpertParams<T>> experts, const GateDecision<T>& gate,
                         Activation act, std::vector<std::size_t>* expert_calls = nullptr);

template <typename T>
struct SparseMlp {
  Tensor<T> w_dec;  // [d × M·D]
  Tensor<T> z;      // [M·D]
  Tensor<T> y;      // [d]
};

// The MoE layer rewritten as one wide MLP whose hidden code is the
// concatenation of ω_j·z(j).
template <typename T>
SparseMlp<T> flatten_to_sparse_mlp(std::span<const ExpertParams<T>> experts, const GateDecision<T>& gate,
                                   const Tensor<T>& x, Activation act);

template <typename T>
Tensor<T> scaled_hidden_code(const std::map<std::size_t, Tensor<T>>& expert_z, const GateDecision<T>& gate,
                             std::size_t hidden);

/// M · Σ f_i·P_i with f_i the argmax-routed token fraction and P_i the mean
/// router probability. Rows of `router_probs` are full softmaxes over M.
template <typename T>
T load_balance_loss(const Tensor<T>& router_probs, std::span<const std::size_t> hard_assignments);

// Op-count model for routing N tokens; the constant factor is 1.
double router_cost_model(double n, double m, double hidden, double width, RouterKind kind);

/// Batched routing decision for a token matrix.
struct BatchRouting {
  std::size_t top_k = 0;
  std::vector<std::uint32_t> selected;  // N×k
  std::vector<float> weights;           // N×k
};

// Routes X [N×d] with the given router. `w_gate` is only read by topk_linear.
BatchRouting route_batch(const TensorF& x, std::span<const ExpertParams<float>> experts, const TensorF* w_gate,
                         RouterKind kind, std::size_t k);

// ---------------------------------------------------------------------------
// Taped layer used inside the transformer.

template <typename T>
struct MoELayerParams {
  std::vector<Var<T>> w_enc;  // M × [D×d]
  std::vector<Var<T>> w_dec;  // M × [d×D]
  std::optional<Var<T>> w_gate;  // [M×d], topk_linear only
};

template <typename T>
struct MoELayerOutput {
  Var<T> y;             // [N×d]
  Var<T> balance_loss;  // scalar
  Tensor<T> raw_scores; // [N×M]
  std::vector<std::uint32_t> selected;  // N×k
  std::vector<double> token_fraction;   // f_i, argmax-routed share per expert
  double mean_selected_l0 = 0;          // mean ‖z(j)‖₀ over (token, selected expert)
  Tensor<T> code;       // [N × M·D] scaled hidden code, filled when requested
};

template <typename T>
MoELayerOutput<T> moe_layer_forward(Var<T> x, const MoELayerParams<T>& params, const MoEConfig& cfg,
                                    bool want_code = false);

}  // namespace moex
