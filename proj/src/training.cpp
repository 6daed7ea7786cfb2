#include "moex/training.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "moex/error.hpp"
#include "moex/io.hpp"

namespace moex {

double lr_at(std::size_t iter, const TrainConfig& cfg) {
  if (iter < cfg.warmup_iters) return cfg.init_lr * static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
  if (iter >= cfg.max_iters) return cfg.min_lr;
  const double ratio = static_cast<double>(iter - cfg.warmup_iters) / static_cast<double>(cfg.max_iters - cfg.warmup_iters);
  const double coeff = 0.5 * (1.0 + std::cos(std::numbers::pi * ratio));
  return cfg.min_lr + coeff * (cfg.init_lr - cfg.min_lr);
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const ParamStore<T>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.shape(), T{0});
    s.v.emplace_back(p.value.shape(), T{0});
  }
  return s;
}

template <typename T>
void adamw_step(ParamStore<T>& params, std::span<const Tensor<T>> grads, AdamState<T>& state, double lr,
                const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adamw: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                         " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape())
      throw DimensionError("adamw: gradient " + shape_str(grads[i].shape()) + " for parameter " + params[i].name +
                           shape_str(params[i].value.shape()));
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient for parameter '" + params[i].name + "'");
  }
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double decay = params[i].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      const double mj = b1 * m[j] + (1 - b1) * g;
      const double vj = b2 * v[j] + (1 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double w = p[j];
      w -= decay * w;
      w -= lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps);
      p[j] = static_cast<T>(w);
    }
  }
}

template <typename T>
double clip_global_norm(std::span<Tensor<T>> grads, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip max_norm must be > 0");
  double sq = 0;
  for (const auto& g : grads)
    for (T v : g.storage()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& v : g.storage()) v = static_cast<T>(v * s);
  }
  return norm;
}

template <typename T>
ParamStore<T> upcycle_from_dense(const ModelConfig& dense_cfg, const ParamStore<T>& dense, const ModelConfig& moe_cfg,
                                 std::uint64_t seed) {
  if (dense_cfg.mlp_kind != MlpKind::kDense) throw ConfigError("upcycle: source model is not dense");
  if (moe_cfg.mlp_kind != MlpKind::kMoE) throw ConfigError("upcycle: target config is not an MoE model");
  moe_cfg.validate();
  if (dense_cfg.dense_hidden() != moe_cfg.moe.expert_hidden)
    throw DimensionError("upcycle: dense MLP hidden size " + std::to_string(dense_cfg.dense_hidden()) +
                         " differs from moe.expert_hidden " + std::to_string(moe_cfg.moe.expert_hidden));
  const auto same = [&](std::size_t a, std::size_t b, const char* key) {
    if (a != b)
      throw ConfigError(std::string("upcycle: ") + key + " differs (" + std::to_string(a) + " vs " + std::to_string(b) +
                        ")");
  };
  same(dense_cfg.n_layer, moe_cfg.n_layer, "model.n_layer");
  same(dense_cfg.n_head, moe_cfg.n_head, "model.n_head");
  same(dense_cfg.d_model, moe_cfg.d_model, "model.d_model");
  same(dense_cfg.vocab_size, moe_cfg.vocab_size, "model.vocab_size");
  same(dense_cfg.ctx_len, moe_cfg.ctx_len, "model.ctx_len");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> init(0.0, 0.02);
  ParamStore<T> out;
  for (const auto& [name, shape] : parameter_layout(moe_cfg)) {
    const auto moe_at = name.find(".moe.");
    if (moe_at == std::string::npos) {
      out.add(name, dense.at(name), shape.size() == 2);
      continue;
    }
    const std::string layer = name.substr(0, moe_at);
    Tensor<T> value(shape, T{0});
    if (name.ends_with(".w_g")) {
      for (auto& v : value.storage()) v = static_cast<T>(init(rng));
    } else if (name.ends_with(".w_enc")) {
      value = dense.at(layer + ".mlp.c_fc.w");
    } else {
      value = dense.at(layer + ".mlp.c_proj.w");
    }
    if (value.shape() != shape)
      throw DimensionError("upcycle: " + name + " expects " + shape_str(shape) + ", dense gives " +
                           shape_str(value.shape()));
    out.add(name, std::move(value), true);
  }
  return out;
}

WindowSampler::WindowSampler(std::span<const std::uint8_t> stream, std::size_t seq, std::uint64_t seed)
    : stream_(stream), seq_(seq), rng_(seed) {
  if (stream_.size() < seq_ + 1)
    throw Error("token stream of " + std::to_string(stream_.size()) + " ids is shorter than one window of " +
                std::to_string(seq_ + 1));
}

void WindowSampler::sample(std::size_t batch, std::vector<int>& inputs, std::vector<int>& targets) {
  inputs.resize(batch * seq_);
  targets.resize(batch * seq_);
  std::uniform_int_distribution<std::size_t> start(0, stream_.size() - seq_ - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t s = start(rng_);
    for (std::size_t t = 0; t < seq_; ++t) {
      inputs[b * seq_ + t] = stream_[s + t];
      targets[b * seq_ + t] = stream_[s + t + 1];
    }
  }
}

std::string WindowSampler::rng_state() const {
  std::ostringstream ss;
  ss << rng_;
  return ss.str();
}

void WindowSampler::set_rng_state(const std::string& state) {
  std::istringstream ss(state);
  ss >> rng_;
  if (!ss) throw FormatError("unreadable sampler RNG state");
}

Trainer::Trainer(ModelConfig model_cfg, TrainConfig train_cfg, ParamStore<float> params)
    : model_(std::move(model_cfg), std::move(params)), train_cfg_(std::move(train_cfg)) {
  train_cfg_.validate();
  adam_ = AdamState<float>::zeros_like(model_.params());
}

Trainer::Trainer(ModelConfig model_cfg, TrainConfig train_cfg)
    : model_(std::move(model_cfg), train_cfg.seed), train_cfg_(std::move(train_cfg)) {
  train_cfg_.validate();
  adam_ = AdamState<float>::zeros_like(model_.params());
}

void Trainer::restore(std::size_t iter, AdamState<float> adam) {
  if (adam.m.size() != model_.params().size() || adam.v.size() != model_.params().size())
    throw DimensionError("optimizer state has " + std::to_string(adam.m.size()) + " moments for " +
                         std::to_string(model_.params().size()) + " parameters");
  iter_ = iter;
  adam_ = std::move(adam);
}

StepResult Trainer::step(std::span<const int> inputs, std::span<const int> targets, std::size_t batch,
                         std::size_t seq) {
  Tape<float> tape;
  auto fp = model_.forward(tape, inputs, batch, seq);
  const Var<float> lm = cross_entropy(fp.logits, targets);
  const double lambda = model_.config().moe.balance_lambda;
  Var<float> total = lm;
  StepResult r;
  r.iter = iter_;
  r.loss_lm = lm.value().item();
  if (fp.balance_loss) {
    r.loss_balance = fp.balance_loss->value().item();
    if (lambda != 0) total = add(lm, scale(*fp.balance_loss, static_cast<float>(lambda)));
  }
  r.loss = total.value().item();
  if (!std::isfinite(r.loss)) throw NumericError("iteration " + std::to_string(iter_) + ": non-finite loss");
  tape.backward(total);
  std::vector<Tensor<float>> grads;
  grads.reserve(fp.params.size());
  for (const auto& p : fp.params) grads.push_back(tape.grad(p));
  r.grad_norm = clip_global_norm(std::span<Tensor<float>>(grads), train_cfg_.grad_clip);
  r.lr = lr_at(iter_, train_cfg_);
  adamw_step(model_.params(), std::span<const Tensor<float>>(grads), adam_, r.lr, train_cfg_);
  r.routing = std::move(fp.routing);
  ++iter_;
  return r;
}

double Trainer::eval_loss(std::span<const int> inputs, std::span<const int> targets, std::size_t batch,
                          std::size_t seq) const {
  Tape<float> tape(false);
  tape.set_grad_enabled(false);
  const auto fp = model_.forward(tape, inputs, batch, seq);
  return cross_entropy(fp.logits.value(), targets);
}

namespace {

constexpr std::string_view kCheckpointMagic = "MOEXCKPT";
constexpr std::uint16_t kCheckpointVersion = 1;

void write_tensor(io::BinaryWriter& w, const std::string& name, const TensorF& t) {
  w.str(name);
  w.u8(0);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (float v : t.storage()) w.f32(v);
}

std::pair<std::string, TensorF> read_tensor(io::BinaryReader& r) {
  std::string name = r.str();
  if (const auto dtype = r.u8(); dtype != 0)
    throw FormatError(r.source() + ": tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
  const std::size_t rank = r.u8();
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = r.u64();
    n *= d;
  }
  if (n * 4 > r.remaining()) throw FormatError(r.source() + ": truncated tensor '" + name + "'");
  TensorF t(shape);
  for (auto& v : t.storage()) v = r.f32();
  return {std::move(name), std::move(t)};
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  io::BinaryWriter w;
  w.bytes(kCheckpointMagic);
  w.u16(kCheckpointVersion);
  w.str(ckpt.config.dump());
  w.u64(ckpt.iter);
  w.u64(ckpt.adam.step);
  const std::size_t n = ckpt.params.size();
  if (ckpt.adam.m.size() != n || ckpt.adam.v.size() != n)
    throw DimensionError("checkpoint optimizer state does not match the parameter count");
  w.u32(static_cast<std::uint32_t>(3 * n));
  for (const auto& p : ckpt.params) write_tensor(w, p.name, p.value);
  for (std::size_t i = 0; i < n; ++i) write_tensor(w, "adam.m/" + ckpt.params[i].name, ckpt.adam.m[i]);
  for (std::size_t i = 0; i < n; ++i) write_tensor(w, "adam.v/" + ckpt.params[i].name, ckpt.adam.v[i]);
  w.str(ckpt.rng);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  io::BinaryReader r(bytes, source);
  r.expect_magic(kCheckpointMagic);
  if (const auto v = r.u16(); v != kCheckpointVersion)
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(v));
  Checkpoint c;
  c.config = nlohmann::json::parse(r.str(), nullptr, false);
  if (c.config.is_discarded()) throw FormatError(source + ": config block is not valid JSON");
  c.iter = r.u64();
  c.adam.step = r.u64();
  const std::size_t count = r.u32();
  if (count % 3 != 0) throw FormatError(source + ": tensor count " + std::to_string(count) + " is not 3 per parameter");
  const std::size_t n = count / 3;
  for (std::size_t i = 0; i < n; ++i) {
    auto [name, t] = read_tensor(r);
    const bool matrix = t.rank() == 2;
    c.params.add(std::move(name), std::move(t), matrix);
  }
  for (auto* moments : {&c.adam.m, &c.adam.v}) {
    const std::string prefix = moments == &c.adam.m ? "adam.m/" : "adam.v/";
    for (std::size_t i = 0; i < n; ++i) {
      auto [name, t] = read_tensor(r);
      if (name != prefix + c.params[i].name || t.shape() != c.params[i].value.shape())
        throw FormatError(source + ": optimizer tensor '" + name + "' does not match parameter '" + c.params[i].name + "'");
      moments->push_back(std::move(t));
    }
  }
  c.rng = r.str();
  if (!r.done()) throw FormatError(source + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { io::write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path), path); }

ToyMoEResult run_toy_moe(const ToyMoEConfig& cfg) {
  MoEConfig moe;
  moe.num_experts = cfg.experts;
  moe.top_k = cfg.top_k;
  moe.expert_hidden = cfg.hidden;
  moe.model_width = cfg.width;
  moe.router = cfg.router;
  moe.activation = cfg.activation;
  moe.balance_lambda = cfg.balance_lambda;
  moe.validate();

  std::mt19937_64 init(cfg.init_seed);
  auto normal = [&](Shape s, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    TensorF t(std::move(s));
    for (auto& v : t.storage()) v = static_cast<float>(n(init));
    return t;
  };
  const double w = static_cast<double>(cfg.width), h = static_cast<double>(cfg.hidden);
  ParamStore<float> store;
  for (std::size_t j = 0; j < cfg.experts; ++j) {
    if (cfg.identical_experts && j > 0) {
      store.add("e" + std::to_string(j) + ".w_enc", store.at("e0.w_enc"), true);
      store.add("e" + std::to_string(j) + ".w_dec", store.at("e0.w_dec"), true);
    } else {
      store.add("e" + std::to_string(j) + ".w_enc", normal({cfg.hidden, cfg.width}, 1.0 / std::sqrt(w)), true);
      store.add("e" + std::to_string(j) + ".w_dec", normal({cfg.width, cfg.hidden}, 1.0 / std::sqrt(h)), true);
    }
  }
  // Every router variant draws W_g so the remaining draws stay aligned.
  TensorF w_g = normal({cfg.experts, cfg.width}, 0.02);
  if (cfg.router == RouterKind::kTopkLinear) store.add("w_g", std::move(w_g), true);
  const TensorF teacher_in = normal({4 * cfg.width, cfg.width}, 1.0 / std::sqrt(w));
  const TensorF teacher_out = normal({cfg.width, 4 * cfg.width}, 1.0 / std::sqrt(4 * w));

  std::mt19937_64 data(cfg.data_seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  auto batch = [&](TensorF& x, TensorF& y) {
    x = TensorF({cfg.tokens, cfg.width});
    for (auto& v : x.storage()) v = unit(data);
    y = matmul_nt(activation(matmul_nt(x, teacher_in), Activation::kRelu), teacher_out);
  };

  TrainConfig opt;
  opt.weight_decay = 0.0;
  opt.warmup_iters = 0;
  opt.max_iters = cfg.steps + 1;
  AdamState<float> adam = AdamState<float>::zeros_like(store);

  auto forward = [&](Tape<float>& tape, const TensorF& x, const TensorF& y, std::vector<Var<float>>& leaves) {
    leaves.clear();
    for (const auto& p : store) leaves.push_back(tape.leaf(p.value, tape.grad_enabled()));
    MoELayerParams<float> mp;
    for (std::size_t j = 0; j < cfg.experts; ++j) {
      mp.w_enc.push_back(leaves[2 * j]);
      mp.w_dec.push_back(leaves[2 * j + 1]);
    }
    if (cfg.router == RouterKind::kTopkLinear) mp.w_gate = leaves.back();
    auto out = moe_layer_forward(tape.constant(x), mp, moe);
    const Var<float> diff = sub(out.y, tape.constant(y));
    Var<float> loss = scale(sum(square(diff)), 1.0f / static_cast<float>(cfg.tokens));
    return std::pair{loss, std::move(out)};
  };

  ToyMoEResult res;
  TensorF x, y;
  std::vector<Var<float>> leaves;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    batch(x, y);
    Tape<float> tape;
    auto [task, out] = forward(tape, x, y, leaves);
    Var<float> total = task;
    if (cfg.balance_lambda != 0) total = add(task, scale(out.balance_loss, static_cast<float>(cfg.balance_lambda)));
    tape.backward(total);
    std::vector<TensorF> grads;
    for (const auto& l : leaves) grads.push_back(tape.grad(l));
    clip_global_norm(std::span<TensorF>(grads), 1.0);
    adamw_step(store, std::span<const TensorF>(grads), adam, cfg.lr, opt);

    double mean = 0, var = 0;
    for (double f : out.token_fraction) mean += f / static_cast<double>(cfg.experts);
    for (double f : out.token_fraction) var += (f - mean) * (f - mean) / static_cast<double>(cfg.experts);
    res.fraction_std.push_back(std::sqrt(var));
    res.mean_l0.push_back(out.mean_selected_l0);
  }
  for (double v : res.fraction_std) res.mean_fraction_std += v / static_cast<double>(cfg.steps);

  batch(x, y);
  Tape<float> eval(false);
  eval.set_grad_enabled(false);
  auto [loss, out] = forward(eval, x, y, leaves);
  res.final_loss = loss.value().item();
  res.final_l0 = out.mean_selected_l0;
  return res;
}

#define MOEX_INSTANTIATE(T)                                                                                      \
  template struct AdamState<T>;                                                                                  \
  template void adamw_step<T>(ParamStore<T>&, std::span<const Tensor<T>>, AdamState<T>&, double,                 \
                              const TrainConfig&);                                                               \
  template double clip_global_norm<T>(std::span<Tensor<T>>, double);                                            \
  template ParamStore<T> upcycle_from_dense<T>(const ModelConfig&, const ParamStore<T>&, const ModelConfig&,     \
                                               std::uint64_t);

MOEX_INSTANTIATE(float)
MOEX_INSTANTIATE(double)

#undef MOEX_INSTANTIATE

}  // namespace moex
