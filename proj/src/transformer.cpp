#include "moex/transformer.hpp"

#include <cmath>
#include <random>

namespace moex {

std::size_t ModelConfig::dense_hidden() const {
  return static_cast<std::size_t>(std::llround(dense.alpha * static_cast<double>(d_model)));
}

std::size_t ModelConfig::hidden_width() const {
  return mlp_kind == MlpKind::kDense ? dense_hidden() : moe.num_experts * moe.expert_hidden;
}

std::size_t ModelConfig::active_mlp_params() const {
  if (mlp_kind == MlpKind::kDense) return 2 * d_model * dense_hidden();
  return moe.top_k * 2 * d_model * moe.expert_hidden;
}

void ModelConfig::validate() const {
  if (n_layer < 1) throw ConfigError("model.n_layer must be >= 1");
  if (n_head < 1 || d_model % n_head != 0)
    throw ConfigError("model.d_model=" + std::to_string(d_model) + " is not divisible by model.n_head=" +
                      std::to_string(n_head));
  if (ctx_len < 1) throw ConfigError("model.ctx_len must be >= 1");
  if (vocab_size < 1) throw ConfigError("model.vocab_size must be >= 1");
  if (dropout != 0.0) throw ConfigError("model.dropout: only 0 is supported");
  if (mlp_kind == MlpKind::kDense) {
    if (dense_hidden() < 1) throw ConfigError("model.alpha gives an empty hidden layer");
    if (dense.topk_activation && (*dense.topk_activation < 1 || *dense.topk_activation > dense_hidden()))
      throw ConfigError("model.topk_activation must lie in [1, hidden]");
  } else {
    moe.validate();
    if (moe.model_width != d_model)
      throw ConfigError("moe.model_width=" + std::to_string(moe.model_width) + " differs from model.d_model=" +
                        std::to_string(d_model));
  }
}

template <typename T>
Tensor<T>& ParamStore<T>::add(std::string name, Tensor<T> value, bool decay) {
  if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(value), decay});
  return params_.back().value;
}

template <typename T>
std::size_t ParamStore<T>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"wte", {cfg.vocab_size, d}});
  out.push_back({"wpe", {cfg.ctx_len, d}});
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    const std::string pre = "h" + std::to_string(l) + ".";
    out.push_back({pre + "ln_1.g", {d}});
    out.push_back({pre + "ln_1.b", {d}});
    out.push_back({pre + "attn.c_attn.w", {3 * d, d}});
    out.push_back({pre + "attn.c_attn.b", {3 * d}});
    out.push_back({pre + "attn.c_proj.w", {d, d}});
    out.push_back({pre + "attn.c_proj.b", {d}});
    out.push_back({pre + "ln_2.g", {d}});
    out.push_back({pre + "ln_2.b", {d}});
    if (cfg.mlp_kind == MlpKind::kDense) {
      const std::size_t h = cfg.dense_hidden();
      out.push_back({pre + "mlp.c_fc.w", {h, d}});
      out.push_back({pre + "mlp.c_fc.b", {h}});
      out.push_back({pre + "mlp.c_proj.w", {d, h}});
      out.push_back({pre + "mlp.c_proj.b", {d}});
    } else {
      const auto& m = cfg.moe;
      if (m.router == RouterKind::kTopkLinear) out.push_back({pre + "moe.w_g", {m.num_experts, d}});
      for (std::size_t j = 0; j < m.num_experts; ++j) {
        out.push_back({pre + "moe.e" + std::to_string(j) + ".w_enc", {m.expert_hidden, d}});
        out.push_back({pre + "moe.e" + std::to_string(j) + ".w_dec", {d, m.expert_hidden}});
      }
    }
  }
  out.push_back({"ln_f.g", {d}});
  out.push_back({"ln_f.b", {d}});
  out.push_back({"lm_head.w", {cfg.vocab_size, d}});
  return out;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const double base_std = 0.02;
  const double proj_std = base_std / std::sqrt(2.0 * static_cast<double>(cfg_.n_layer));
  for (auto& [name, shape] : parameter_layout(cfg_)) {
    Tensor<T> v(shape, T{0});
    const bool matrix = shape.size() == 2;
    if (ends_with(name, ".g")) {
      v.fill(T{1});
    } else if (matrix) {
      const bool residual_out = ends_with(name, "c_proj.w") || ends_with(name, ".w_dec");
      std::normal_distribution<double> dist(0.0, residual_out ? proj_std : base_std);
      for (auto& x : v.storage()) x = static_cast<T>(dist(rng));
    }
    params_.add(name, std::move(v), matrix);
  }
}

template <typename T>
Model<T>::Model(ModelConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const auto layout = parameter_layout(cfg_);
  if (layout.size() != params_.size())
    throw ConfigError("parameter set has " + std::to_string(params_.size()) + " tensors, config expects " +
                      std::to_string(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (params_[i].name != layout[i].first || params_[i].value.shape() != layout[i].second)
      throw DimensionError("parameter " + std::to_string(i) + " is " + params_[i].name + shape_str(params_[i].value.shape()) +
                           ", expected " + layout[i].first + shape_str(layout[i].second));
  }
}

template <typename T>
void Model<T>::check_tokens(std::span<const int> tokens, std::size_t seq) const {
  if (seq < 1 || seq > cfg_.ctx_len)
    throw DimensionError("sequence length " + std::to_string(seq) + " exceeds context " + std::to_string(cfg_.ctx_len));
  for (int id : tokens)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
      throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
}

template <typename T>
ForwardPass<T> Model<T>::forward(Tape<T>& tape, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                                 const ForwardOptions& opts) const {
  if (tokens.size() != batch * seq)
    throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) +
                         " x seq " + std::to_string(seq));
  check_tokens(tokens, seq);
  if (opts.trace_layer && *opts.trace_layer >= cfg_.n_layer)
    throw DimensionError("layer " + std::to_string(*opts.trace_layer) + " out of range [0, " +
                         std::to_string(cfg_.n_layer) + ")");

  ForwardPass<T> fp;
  fp.params.reserve(params_.size());
  for (const auto& p : params_) fp.params.push_back(tape.leaf(p.value, tape.grad_enabled()));
  auto P = [&](const std::string& name) { return fp.params[params_.index_of(name)]; };

  const std::size_t rows = batch * seq;
  std::vector<std::uint32_t> ids(rows), pos(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    ids[i] = static_cast<std::uint32_t>(tokens[i]);
    pos[i] = static_cast<std::uint32_t>(i % seq);
  }
  Var<T> x = add(gather_rows(P("wte"), std::span<const std::uint32_t>(ids)),
                 gather_rows(P("wpe"), std::span<const std::uint32_t>(pos)));

  for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
    const std::string pre = "h" + std::to_string(l) + ".";
    const bool traced = opts.trace_layer && *opts.trace_layer == l;

    Var<T> a = layer_norm_rows(x, P(pre + "ln_1.g"), P(pre + "ln_1.b"));
    Var<T> qkv = add_bias(linear(a, P(pre + "attn.c_attn.w")), P(pre + "attn.c_attn.b"));
    Var<T> att = causal_attention(qkv, batch, seq, cfg_.n_head);
    x = add(x, add_bias(linear(att, P(pre + "attn.c_proj.w")), P(pre + "attn.c_proj.b")));

    Var<T> m = layer_norm_rows(x, P(pre + "ln_2.g"), P(pre + "ln_2.b"));
    Var<T> mlp_out;
    if (cfg_.mlp_kind == MlpKind::kDense) {
      Var<T> h = activation(add_bias(linear(m, P(pre + "mlp.c_fc.w")), P(pre + "mlp.c_fc.b")), cfg_.dense.activation);
      if (cfg_.dense.topk_activation) h = topk_mask_rows(h, *cfg_.dense.topk_activation);
      if (traced) fp.trace = h.value();
      mlp_out = add_bias(linear(h, P(pre + "mlp.c_proj.w")), P(pre + "mlp.c_proj.b"));
    } else {
      MoELayerParams<T> mp;
      if (cfg_.moe.router == RouterKind::kTopkLinear) mp.w_gate = P(pre + "moe.w_g");
      for (std::size_t j = 0; j < cfg_.moe.num_experts; ++j) {
        mp.w_enc.push_back(P(pre + "moe.e" + std::to_string(j) + ".w_enc"));
        mp.w_dec.push_back(P(pre + "moe.e" + std::to_string(j) + ".w_dec"));
      }
      auto out = moe_layer_forward(m, mp, cfg_.moe, traced);
      fp.balance_loss = fp.balance_loss ? add(*fp.balance_loss, out.balance_loss) : out.balance_loss;
      fp.routing.push_back({std::move(out.token_fraction), out.mean_selected_l0});
      if (traced) {
        fp.trace = std::move(out.code);
        if (opts.trace_gate_scores) fp.trace_scores = std::move(out.raw_scores);
      }
      mlp_out = out.y;
    }
    x = add(x, mlp_out);
  }
  x = layer_norm_rows(x, P("ln_f.g"), P("ln_f.b"));
  fp.logits = linear(x, P("lm_head.w"));
  return fp;
}

template <typename T>
Tensor<T> Model<T>::logits(std::span<const int> tokens) const {
  Tape<T> tape(false);
  tape.set_grad_enabled(false);
  return forward(tape, tokens, 1, tokens.size()).logits.value();
}

template <typename T>
Tensor<T> Model<T>::harvest_hidden(std::span<const int> tokens, std::size_t layer,
                                   std::span<const std::size_t> positions) const {
  Tape<T> tape(false);
  tape.set_grad_enabled(false);
  ForwardOptions opts;
  opts.trace_layer = layer;
  const auto fp = forward(tape, tokens, 1, tokens.size(), opts);
  const std::size_t width = fp.trace.cols();
  Tensor<T> out({positions.size(), width});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= tokens.size())
      throw DimensionError("harvest position " + std::to_string(positions[i]) + " beyond sequence of " +
                           std::to_string(tokens.size()));
    std::copy_n(fp.trace.data() + positions[i] * width, width, out.data() + i * width);
  }
  return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Model<float>;
template class Model<double>;

}  // namespace moex
