#include "moex/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace moex {

RouterKind parse_router(std::string_view name) {
  if (name == "topk_linear") return RouterKind::kTopkLinear;
  if (name == "sparsity_aware") return RouterKind::kSparsityAware;
  if (name == "bruteforce_l0") return RouterKind::kBruteforceL0;
  throw ConfigError("unknown router '" + std::string(name) +
                    "' (expected topk_linear, sparsity_aware or bruteforce_l0)");
}

std::string_view router_name(RouterKind r) {
  switch (r) {
    case RouterKind::kTopkLinear: return "topk_linear";
    case RouterKind::kSparsityAware: return "sparsity_aware";
    case RouterKind::kBruteforceL0: return "bruteforce_l0";
  }
  return "?";
}

void MoEConfig::validate() const {
  if (num_experts < 1) throw ConfigError("moe: need at least one expert");
  if (top_k < 1 || top_k > num_experts)
    throw ConfigError("moe: top_k=" + std::to_string(top_k) + " must lie in [1, " + std::to_string(num_experts) + "]");
  if (expert_hidden < 1 || model_width < 1) throw ConfigError("moe: dimensions must be positive");
  if (!(balance_lambda >= 0)) throw ConfigError("moe: balance_lambda must be >= 0");
}

namespace {

template <typename T>
void check_expert(const Tensor<T>& x, const ExpertParams<T>& e) {
  if (e.w_enc.rank() != 2 || e.w_dec.rank() != 2 || e.w_dec.dim(0) != e.w_enc.dim(1) ||
      e.w_dec.dim(1) != e.w_enc.dim(0))
    throw DimensionError("expert: W_enc " + shape_str(e.w_enc.shape()) + " and W_dec " + shape_str(e.w_dec.shape()) +
                         " are inconsistent");
  if (x.size() != e.w_enc.dim(1))
    throw DimensionError("expert: input of length " + std::to_string(x.size()) + " for W_enc " +
                         shape_str(e.w_enc.shape()));
}

// w [r×c] · v [c] -> [r]
template <typename T>
Tensor<T> matvec(const Tensor<T>& w, std::span<const T> v) {
  const std::size_t r = w.dim(0), c = w.dim(1);
  Tensor<T> out({r});
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = w.data() + i * c;
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += row[j] * v[j];
    out[i] = acc;
  }
  return out;
}

template <typename T>
T sparsity_score_from_moments(T mean, T var, bool literal_variance) {
  const T floored = std::max(var, T(kVarianceFloor));
  const T denom = literal_variance ? floored : std::sqrt(floored);
  return -std::erf(mean / (std::numbers::sqrt2_v<T> * denom));
}

float dot(const float* a, const float* b, std::size_t n) {
  float s = 0;
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

template <typename T>
ExpertOutput<T> expert_forward(const Tensor<T>& x, const ExpertParams<T>& e, Activation act) {
  check_expert(x, e);
  ExpertOutput<T> out;
  out.h = matvec<T>(e.w_enc, x.span());
  out.z = activation(out.h, act);
  out.y = matvec<T>(e.w_dec, out.z.span());
  return out;
}

template <typename T>
GateDecision<T> gate_from_scores(Tensor<T> raw_scores, std::size_t k) {
  auto top = topk_values<T>(raw_scores.span(), k);
  softmax_inplace(std::span<T>(top.values));
  GateDecision<T> g;
  g.weights = Tensor<T>({raw_scores.size()}, T{0});
  for (std::size_t i = 0; i < k; ++i) g.weights[top.indices[i]] = top.values[i];
  g.selected = std::move(top.indices);
  g.raw_scores = std::move(raw_scores);
  return g;
}

template <typename T>
GateDecision<T> topk_linear_gate(const Tensor<T>& x, const Tensor<T>& w_gate, std::size_t k) {
  if (w_gate.rank() != 2 || w_gate.dim(1) != x.size())
    throw DimensionError("topk_linear_gate: W_g " + shape_str(w_gate.shape()) + " for input of length " +
                         std::to_string(x.size()));
  return gate_from_scores(matvec<T>(w_gate, x.span()), k);
}

template <typename T>
RouterStats<T> compute_router_stats(const ExpertParams<T>& e) {
  const std::size_t rows = e.w_enc.dim(0), cols = e.w_enc.dim(1);
  RouterStats<T> s{Tensor<T>({cols}), Tensor<T>({cols})};
  // One pass over W_enc; double sums keep E[w²] - μ² accurate.
  std::vector<double> sum(cols, 0.0), sq(cols, 0.0);
  const T* w = e.w_enc.data();
  for (std::size_t m = 0; m < rows; ++m) {
    const T* row = w + m * cols;
    for (std::size_t i = 0; i < cols; ++i) {
      const double v = row[i];
      sum[i] += v;
      sq[i] += v * v;
    }
  }
  for (std::size_t i = 0; i < cols; ++i) {
    const double mean = sum[i] / static_cast<double>(rows);
    s.mu[i] = static_cast<T>(mean);
    s.var[i] = static_cast<T>(std::max(0.0, sq[i] / static_cast<double>(rows) - mean * mean));
  }
  return s;
}

template <typename T>
PreactivationMoments<T> preactivation_moments(const Tensor<T>& x, const RouterStats<T>& stats) {
  if (x.size() != stats.mu.size() || x.size() != stats.var.size())
    throw DimensionError("router stats of width " + std::to_string(stats.mu.size()) + " for input of length " +
                         std::to_string(x.size()));
  T mean = 0, var = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mean += stats.mu[i] * x[i];
    var += stats.var[i] * x[i] * x[i];
  }
  const T floored = std::max(var, T(kVarianceFloor));
  return {mean, floored, std::sqrt(floored)};
}

template <typename T>
T estimate_expected_l0(const Tensor<T>& x, const RouterStats<T>& stats, std::size_t hidden) {
  const auto mom = preactivation_moments(x, stats);
  return T(hidden) * normal_cdf(mom.mean / mom.stddev);
}

template <typename T>
T sparsity_score(const Tensor<T>& x, const RouterStats<T>& stats, bool literal_variance) {
  const auto mom = preactivation_moments(x, stats);
  return sparsity_score_from_moments(mom.mean, mom.variance, literal_variance);
}

template <typename T>
GateDecision<T> sparsity_aware_gate(const Tensor<T>& x, std::span<const RouterStats<T>> stats, std::size_t k,
                                    bool literal_variance) {
  Tensor<T> raw({stats.size()});
  for (std::size_t j = 0; j < stats.size(); ++j) raw[j] = sparsity_score(x, stats[j], literal_variance);
  return gate_from_scores(std::move(raw), k);
}

template <typename T>
std::size_t exact_l0(const Tensor<T>& x, const ExpertParams<T>& e) {
  check_expert(x, e);
  const Tensor<T> h = matvec<T>(e.w_enc, x.span());
  return static_cast<std::size_t>(std::count_if(h.storage().begin(), h.storage().end(), [](T v) { return v > T{0}; }));
}

template <typename T>
GateDecision<T> bruteforce_l0_gate(const Tensor<T>& x, std::span<const ExpertParams<T>> experts, std::size_t k) {
  Tensor<T> raw({experts.size()});
  for (std::size_t j = 0; j < experts.size(); ++j) raw[j] = -T(exact_l0(x, experts[j]));
  return gate_from_scores(std::move(raw), k);
}

template <typename T>
MoEOutput<T> moe_forward(const Tensor<T>& x, std::span<const ExpertParams<T>> experts, const GateDecision<T>& gate,
                         Activation act, std::vector<std::size_t>* expert_calls) {
  if (gate.weights.size() != experts.size())
    throw DimensionError("moe_forward: gate over " + std::to_string(gate.weights.size()) + " experts, layer has " +
                         std::to_string(experts.size()));
  MoEOutput<T> out;
  out.y = Tensor<T>({x.size()}, T{0});
  for (std::size_t j : gate.selected) {
    auto e = expert_forward(x, experts[j], act);
    if (expert_calls) {
      if (expert_calls->size() < experts.size()) expert_calls->resize(experts.size(), 0);
      ++(*expert_calls)[j];
    }
    const T w = gate.weights[j];
    for (std::size_t i = 0; i < out.y.size(); ++i) out.y[i] += w * e.y[i];
    out.expert_z.emplace(j, std::move(e.z));
  }
  return out;
}

template <typename T>
SparseMlp<T> flatten_to_sparse_mlp(std::span<const ExpertParams<T>> experts, const GateDecision<T>& gate,
                                   const Tensor<T>& x, Activation act) {
  if (experts.empty()) throw DimensionError("flatten_to_sparse_mlp: no experts");
  const std::size_t m = experts.size(), hidden = experts[0].hidden(), d = experts[0].width();
  SparseMlp<T> out;
  out.w_dec = Tensor<T>({d, m * hidden});
  for (std::size_t j = 0; j < m; ++j) {
    if (experts[j].hidden() != hidden || experts[j].width() != d)
      throw DimensionError("flatten_to_sparse_mlp: expert shapes differ");
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < hidden; ++c) out.w_dec.at(r, j * hidden + c) = experts[j].w_dec.at(r, c);
  }
  out.z = Tensor<T>({m * hidden}, T{0});
  for (std::size_t j : gate.selected) {
    const auto e = expert_forward(x, experts[j], act);
    for (std::size_t c = 0; c < hidden; ++c) out.z[j * hidden + c] = gate.weights[j] * e.z[c];
  }
  out.y = matvec<T>(out.w_dec, out.z.span());
  return out;
}

template <typename T>
Tensor<T> scaled_hidden_code(const std::map<std::size_t, Tensor<T>>& expert_z, const GateDecision<T>& gate,
                             std::size_t hidden) {
  const std::size_t m = gate.weights.size();
  Tensor<T> code({m * hidden}, T{0});
  for (const auto& [j, z] : expert_z) {
    if (z.size() != hidden || j >= m) throw DimensionError("scaled_hidden_code: expert block shape mismatch");
    for (std::size_t c = 0; c < hidden; ++c) code[j * hidden + c] = gate.weights[j] * z[c];
  }
  return code;
}

template <typename T>
T load_balance_loss(const Tensor<T>& router_probs, std::span<const std::size_t> hard_assignments) {
  const std::size_t tokens = router_probs.rows(), m = router_probs.cols();
  if (hard_assignments.size() != tokens)
    throw DimensionError("load_balance_loss: " + std::to_string(hard_assignments.size()) + " assignments for " +
                         std::to_string(tokens) + " tokens");
  std::vector<T> f(m, T{0}), p(m, T{0});
  for (std::size_t t = 0; t < tokens; ++t) {
    if (hard_assignments[t] >= m) throw DimensionError("load_balance_loss: assignment out of range");
    f[hard_assignments[t]] += T(1);
    for (std::size_t i = 0; i < m; ++i) p[i] += router_probs.at(t, i);
  }
  T acc = 0;
  for (std::size_t i = 0; i < m; ++i) acc += (f[i] / T(tokens)) * (p[i] / T(tokens));
  return T(m) * acc;
}

double router_cost_model(double n, double m, double hidden, double width, RouterKind kind) {
  if (!(n > 0 && m > 0 && hidden > 0 && width > 0)) throw ConfigError("router_cost_model: dimensions must be positive");
  switch (kind) {
    case RouterKind::kTopkLinear: return n * m * width;
    case RouterKind::kBruteforceL0: return n * m * hidden * width;
    case RouterKind::kSparsityAware: return (n + hidden) * m * width;
  }
  return 0;
}

BatchRouting route_batch(const TensorF& x, std::span<const ExpertParams<float>> experts, const TensorF* w_gate,
                         RouterKind kind, std::size_t k) {
  const std::size_t n = x.rows(), m = experts.size(), d = x.cols();
  if (k < 1 || k > m) throw DimensionError("route_batch: k out of range");
  TensorF scores;
  switch (kind) {
    case RouterKind::kTopkLinear: {
      if (!w_gate) throw ConfigError("route_batch: topk_linear needs a gate matrix");
      scores = matmul_nt(x, *w_gate);
      break;
    }
    case RouterKind::kSparsityAware: {
      TensorF mu({m, d}), var({m, d});
      for (std::size_t j = 0; j < m; ++j) {
        const auto s = compute_router_stats(experts[j]);
        std::copy(s.mu.storage().begin(), s.mu.storage().end(), mu.data() + j * d);
        std::copy(s.var.storage().begin(), s.var.storage().end(), var.data() + j * d);
      }
      // One pass per token: both moments for every expert.
      scores = TensorF({n, m});
      std::vector<float> x2(d);
      for (std::size_t t = 0; t < n; ++t) {
        const float* xr = x.data() + t * d;
        for (std::size_t i = 0; i < d; ++i) x2[i] = xr[i] * xr[i];
        for (std::size_t j = 0; j < m; ++j) {
          const float mean = dot(xr, mu.data() + j * d, d);
          const float v = dot(x2.data(), var.data() + j * d, d);
          scores.at(t, j) = sparsity_score_from_moments(mean, v, false);
        }
      }
      break;
    }
    case RouterKind::kBruteforceL0: {
      scores = TensorF({n, m});
      for (std::size_t j = 0; j < m; ++j) {
        const TensorF h = matmul_nt(x, experts[j].w_enc);
        const std::size_t hidden = h.cols();
        for (std::size_t t = 0; t < n; ++t) {
          const float* row = h.data() + t * hidden;
          std::size_t count = 0;
          for (std::size_t c = 0; c < hidden; ++c) count += row[c] > 0.0f;
          scores.at(t, j) = -static_cast<float>(count);
        }
      }
      break;
    }
  }
  BatchRouting out;
  out.top_k = k;
  out.selected.resize(n * k);
  out.weights.resize(n * k);
  for (std::size_t t = 0; t < n; ++t) {
    auto top = topk_values<float>(scores.row(t), k);
    softmax_inplace(std::span<float>(top.values));
    for (std::size_t i = 0; i < k; ++i) {
      out.selected[t * k + i] = static_cast<std::uint32_t>(top.indices[i]);
      out.weights[t * k + i] = top.values[i];
    }
  }
  return out;
}

template <typename T>
MoELayerOutput<T> moe_layer_forward(Var<T> x, const MoELayerParams<T>& params, const MoEConfig& cfg, bool want_code) {
  cfg.validate();
  Tape<T>& tape = *x.tape;
  const std::size_t n = x.value().rows(), m = cfg.num_experts, k = cfg.top_k, hidden = cfg.expert_hidden,
                    d = x.value().cols();
  if (params.w_enc.size() != m || params.w_dec.size() != m)
    throw DimensionError("moe layer: parameter count does not match num_experts");

  Var<T> raw;
  switch (cfg.router) {
    case RouterKind::kTopkLinear:
      if (!params.w_gate) throw ConfigError("moe layer: topk_linear router needs W_g");
      raw = linear(x, *params.w_gate);
      break;
    case RouterKind::kSparsityAware: {
      std::vector<Var<T>> mus, vars;
      for (std::size_t j = 0; j < m; ++j) {
        Var<T> w = cfg.detach_router ? detach(params.w_enc[j]) : params.w_enc[j];
        mus.push_back(mean_rows(w));
        vars.push_back(var_rows(w));
      }
      const Var<T> mu_h = linear(x, concat_rows<T>(mus));
      const Var<T> var_h = linear(square(x), concat_rows<T>(vars));
      const Var<T> denom = cfg.literal_variance ? clamp_min(var_h, T(kVarianceFloor)) : sqrt_floor(var_h, T(kVarianceFloor));
      raw = scale(erf(scale(div(mu_h, denom), T(1) / std::numbers::sqrt2_v<T>)), T(-1));
      break;
    }
    case RouterKind::kBruteforceL0: {
      Tensor<T> s({n, m});
      for (std::size_t j = 0; j < m; ++j) {
        const Tensor<T> h = matmul_nt(x.value(), params.w_enc[j].value());
        for (std::size_t t = 0; t < n; ++t) {
          auto row = h.row(t);
          s.at(t, j) = -T(std::count_if(row.begin(), row.end(), [](T v) { return v > T{0}; }));
        }
      }
      raw = tape.constant(std::move(s));
      break;
    }
  }

  MoELayerOutput<T> out;
  out.raw_scores = raw.value();

  // Load balance: argmax fractions (constant) against mean full-softmax mass.
  Tensor<T> frac({1, m}, T{0});
  for (std::size_t t = 0; t < n; ++t) {
    auto row = out.raw_scores.row(t);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    frac[best] += T(1) / T(n);
  }
  out.token_fraction.assign(frac.storage().begin(), frac.storage().end());
  const Var<T> mass = mean_rows(softmax_rows(raw));
  out.balance_loss = scale(sum(mul(mass, tape.constant(std::move(frac)))), T(m));

  auto gate = topk_softmax_rows(raw, k);
  out.selected = gate.selected;
  if (want_code) out.code = Tensor<T>({n, m * hidden}, T{0});

  std::vector<std::vector<std::uint32_t>> routed(m);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < k; ++i) routed[gate.selected[t * k + i]].push_back(static_cast<std::uint32_t>(t));

  Var<T> y = tape.constant(Tensor<T>({n, d}, T{0}));
  double l0_total = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const auto& rows = routed[j];
    if (rows.empty()) continue;
    const Var<T> xe = gather_rows(x, std::span<const std::uint32_t>(rows));
    const Var<T> z = activation(linear(xe, params.w_enc[j]), cfg.activation);
    const Var<T> we = gather_column(gate.weights, std::span<const std::uint32_t>(rows), j);
    const Var<T> ye = scale_rows(linear(z, params.w_dec[j]), we);
    y = scatter_add_rows(y, ye, std::span<const std::uint32_t>(rows));

    const auto& zv = z.value();
    for (T v : zv.storage()) l0_total += v != T{0};
    if (want_code) {
      const auto& wv = we.value();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < hidden; ++c) out.code.at(rows[i], j * hidden + c) = wv[i] * zv.at(i, c);
    }
  }
  out.mean_selected_l0 = l0_total / double(n * k);
  out.y = y;
  return out;
}

#define MOEX_INSTANTIATE(T)                                                                                        \
  template ExpertOutput<T> expert_forward<T>(const Tensor<T>&, const ExpertParams<T>&, Activation);                \
  template GateDecision<T> gate_from_scores<T>(Tensor<T>, std::size_t);                                            \
  template GateDecision<T> topk_linear_gate<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                   \
  template RouterStats<T> compute_router_stats<T>(const ExpertParams<T>&);                                         \
  template PreactivationMoments<T> preactivation_moments<T>(const Tensor<T>&, const RouterStats<T>&);              \
  template T estimate_expected_l0<T>(const Tensor<T>&, const RouterStats<T>&, std::size_t);                        \
  template T sparsity_score<T>(const Tensor<T>&, const RouterStats<T>&, bool);                                     \
  template GateDecision<T> sparsity_aware_gate<T>(const Tensor<T>&, std::span<const RouterStats<T>>, std::size_t,  \
                                                  bool);                                                           \
  template std::size_t exact_l0<T>(const Tensor<T>&, const ExpertParams<T>&);                                      \
  template GateDecision<T> bruteforce_l0_gate<T>(const Tensor<T>&, std::span<const ExpertParams<T>>, std::size_t); \
  template MoEOutput<T> moe_forward<T>(const Tensor<T>&, std::span<const ExpertParams<T>>, const GateDecision<T>&, \
                                       Activation, std::vector<std::size_t>*);                                     \
  template SparseMlp<T> flatten_to_sparse_mlp<T>(std::span<const ExpertParams<T>>, const GateDecision<T>&,         \
                                                 const Tensor<T>&, Activation);                                    \
  template Tensor<T> scaled_hidden_code<T>(const std::map<std::size_t, Tensor<T>>&, const GateDecision<T>&,        \
                                           std::size_t);                                                           \
  template T load_balance_loss<T>(const Tensor<T>&, std::span<const std::size_t>);                                 \
  template MoELayerOutput<T> moe_layer_forward<T>(Var<T>, const MoELayerParams<T>&, const MoEConfig&, bool);

MOEX_INSTANTIATE(float)
MOEX_INSTANTIATE(double)

#undef MOEX_INSTANTIATE

}  // namespace moex
