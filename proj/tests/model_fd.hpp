#pragma once

// Small transformer configs and an end-to-end gradient check against
// central differences, shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "moex/transformer.hpp"

namespace modelfd {

using namespace moex;

inline ModelConfig small_dense(Activation act = Activation::kGelu) {
  ModelConfig c;
  c.n_layer = 2;
  c.n_head = 2;
  c.d_model = 16;
  c.vocab_size = 32;
  c.ctx_len = 24;
  c.dense.alpha = 2.0;
  c.dense.activation = act;
  return c;
}

inline ModelConfig small_moe(RouterKind router, std::size_t m = 4, std::size_t k = 2) {
  ModelConfig c = small_dense();
  c.mlp_kind = MlpKind::kMoE;
  c.moe.num_experts = m;
  c.moe.top_k = k;
  c.moe.expert_hidden = 8;
  c.moe.model_width = c.d_model;
  c.moe.router = router;
  return c;
}

inline std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> id(0, static_cast<int>(vocab) - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = id(rng);
  return out;
}

template <typename T>
inline void perturb_all(ParamStore<T>& store, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& p : store)
    for (auto& v : p.value.storage()) v += static_cast<T>(n(rng));
}



// Tape gradients of the training loss against central differences, sampled
// coordinates of every parameter tensor.
inline double end_to_end_fd_error(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model<double> model(cfg, seed);
  perturb_all(model.params(), rng, 0.3);
  const std::size_t batch = 2, seq = 6;
  const auto tokens = random_tokens(batch * seq, cfg.vocab_size, rng);
  const auto targets = random_tokens(batch * seq, cfg.vocab_size, rng);
  const auto loss_of = [&](const Model<double>& m, Tape<double>& tape) {
    const auto fp = m.forward(tape, tokens, batch, seq);
    auto loss = cross_entropy(fp.logits, std::span<const int>(targets));
    if (fp.balance_loss) loss = add(loss, scale(*fp.balance_loss, 0.01));
    return loss;
  };
  Tape<double> tape;
  const auto loss = loss_of(model, tape);
  tape.backward(loss);
  const auto fp_params = [&] {
    std::vector<TensorD> g;
    // forward() registers one leaf per parameter in store order, first.
    for (std::size_t i = 0; i < model.params().size(); ++i) g.push_back(tape.grad(Var<double>{&tape, static_cast<int>(i)}));
    return g;
  }();
  double worst = 0;
  const double eps = 1e-5;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& value = model.params()[i].value;
    std::uniform_int_distribution<std::size_t> pick(0, value.size() - 1);
    for (int s = 0; s < 3; ++s) {
      const std::size_t c = pick(rng);
      const double orig = value[c];
      value[c] = orig + eps;
      Tape<double> tp(false);
      const double up = loss_of(model, tp).value().item();
      value[c] = orig - eps;
      Tape<double> tm(false);
      const double down = loss_of(model, tm).value().item();
      value[c] = orig;
      const double fd = (up - down) / (2 * eps);
      const double g = fp_params[i][c];
      if (std::abs(g) < 1e-7 && std::abs(fd) < 1e-7) continue;
      worst = std::max(worst, std::abs(g - fd) / std::max(std::abs(g), std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace modelfd
