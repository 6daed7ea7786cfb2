#include "moex/config.hpp"

#include <cstdlib>
#include <functional>
#include <map>

#include "moex/error.hpp"
#include "moex/io.hpp"

namespace moex {

void TrainConfig::validate() const {
  if (!(init_lr > 0)) throw ConfigError("train.init_lr must be > 0");
  if (!(min_lr > 0 && min_lr <= init_lr)) throw ConfigError("train.min_lr must lie in (0, train.init_lr]");
  if (warmup_iters >= max_iters)
    throw ConfigError("train.warmup_iters=" + std::to_string(warmup_iters) + " must be below train.max_iters=" +
                      std::to_string(max_iters));
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(grad_clip > 0)) throw ConfigError("train.grad_clip must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (eval_interval < 1 || ckpt_interval < 1) throw ConfigError("train intervals must be >= 1");
}

std::vector<double> InterpConfig::grid() const {
  std::vector<double> g;
  for (std::size_t i = 0; i < grid_points; ++i) g.push_back(static_cast<double>(i) / static_cast<double>(grid_points));
  return g;
}

void InterpConfig::validate() const {
  if (grid_points < 1) throw ConfigError("interp.grid_points must be >= 1");
  if (!(min_precision > 0 && min_precision <= 1)) throw ConfigError("interp.min_precision must lie in (0, 1]");
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("interp.train_fraction must lie in (0, 1)");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  interp.validate();
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("data.val_fraction must lie in (0, 1)");
}

namespace {

using nlohmann::json;

struct Field {
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
T as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
        throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has invalid value " + v.dump());
  }
}

template <typename T, typename Ref>
Field field(const std::string& key, Ref ref) {
  return {[ref](const RunConfig& c) { return json(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const json& v) { ref(c) = as<T>(v, key); }};
}

template <typename Parse, typename Name, typename Ref>
Field enum_field(const std::string& key, Ref ref, Parse parse, Name name) {
  return {[ref, name](const RunConfig& c) { return json(std::string(name(ref(const_cast<RunConfig&>(c))))); },
          [ref, parse, key](RunConfig& c, const json& v) { ref(c) = parse(as<std::string>(v, key)); }};
}

#define MOEX_FIELD(type, key, expr) \
  { key, field<type>(key, [](RunConfig& c) -> type& { return expr; }) }

const std::map<std::string, Field>& registry() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f{
        MOEX_FIELD(std::size_t, "model.n_layer", c.model.n_layer),
        MOEX_FIELD(std::size_t, "model.n_head", c.model.n_head),
        MOEX_FIELD(std::size_t, "model.d_model", c.model.d_model),
        MOEX_FIELD(std::size_t, "model.vocab_size", c.model.vocab_size),
        MOEX_FIELD(std::size_t, "model.ctx_len", c.model.ctx_len),
        MOEX_FIELD(double, "model.alpha", c.model.dense.alpha),
        MOEX_FIELD(double, "model.dropout", c.model.dropout),
        MOEX_FIELD(std::size_t, "moe.num_experts", c.model.moe.num_experts),
        MOEX_FIELD(std::size_t, "moe.top_k", c.model.moe.top_k),
        MOEX_FIELD(std::size_t, "moe.expert_hidden", c.model.moe.expert_hidden),
        MOEX_FIELD(double, "moe.balance_lambda", c.model.moe.balance_lambda),
        MOEX_FIELD(bool, "moe.literal_variance", c.model.moe.literal_variance),
        MOEX_FIELD(bool, "moe.detach_router", c.model.moe.detach_router),
        MOEX_FIELD(double, "train.init_lr", c.train.init_lr),
        MOEX_FIELD(double, "train.min_lr", c.train.min_lr),
        MOEX_FIELD(std::size_t, "train.warmup_iters", c.train.warmup_iters),
        MOEX_FIELD(std::size_t, "train.max_iters", c.train.max_iters),
        MOEX_FIELD(std::size_t, "train.batch_size", c.train.batch_size),
        MOEX_FIELD(double, "train.grad_clip", c.train.grad_clip),
        MOEX_FIELD(std::uint64_t, "train.seed", c.train.seed),
        MOEX_FIELD(double, "train.beta1", c.train.beta1),
        MOEX_FIELD(double, "train.beta2", c.train.beta2),
        MOEX_FIELD(double, "train.eps", c.train.eps),
        MOEX_FIELD(double, "train.weight_decay", c.train.weight_decay),
        MOEX_FIELD(std::size_t, "train.eval_interval", c.train.eval_interval),
        MOEX_FIELD(std::size_t, "train.eval_batches", c.train.eval_batches),
        MOEX_FIELD(std::size_t, "train.ckpt_interval", c.train.ckpt_interval),
        MOEX_FIELD(std::size_t, "interp.min_fire", c.interp.min_fire),
        MOEX_FIELD(double, "interp.min_precision", c.interp.min_precision),
        MOEX_FIELD(double, "interp.train_fraction", c.interp.train_fraction),
        MOEX_FIELD(std::size_t, "interp.grid_points", c.interp.grid_points),
        MOEX_FIELD(double, "data.val_fraction", c.val_fraction),
    };
    f.emplace("model.mlp",
              Field{[](const RunConfig& c) { return json(c.model.mlp_kind == MlpKind::kDense ? "dense" : "moe"); },
                    [](RunConfig& c, const json& v) {
                      const auto s = as<std::string>(v, "model.mlp");
                      if (s == "dense") c.model.mlp_kind = MlpKind::kDense;
                      else if (s == "moe") c.model.mlp_kind = MlpKind::kMoE;
                      else throw ConfigError("model.mlp must be 'dense' or 'moe', got '" + s + "'");
                    }});
    f.emplace("model.topk_activation",
              Field{[](const RunConfig& c) { return json(c.model.dense.topk_activation.value_or(0)); },
                    [](RunConfig& c, const json& v) {
                      const auto k = as<std::size_t>(v, "model.topk_activation");
                      c.model.dense.topk_activation = k ? std::optional<std::size_t>(k) : std::nullopt;
                    }});
    f.emplace("model.activation",
              enum_field("model.activation", [](RunConfig& c) -> Activation& { return c.model.dense.activation; },
                         parse_activation, activation_name));
    f.emplace("moe.activation",
              enum_field("moe.activation", [](RunConfig& c) -> Activation& { return c.model.moe.activation; },
                         parse_activation, activation_name));
    f.emplace("moe.router", enum_field("moe.router", [](RunConfig& c) -> RouterKind& { return c.model.moe.router; },
                                       parse_router, router_name));
    return f;
  }();
  return fields;
}

#undef MOEX_FIELD

void sync_derived(RunConfig& c) { c.model.moe.model_width = c.model.d_model; }

}  // namespace

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [key, f] : registry()) out[key] = f.get(cfg);
  return out;
}

RunConfig from_json(const nlohmann::json& flat, RunConfig base) {
  if (!flat.is_object()) throw ConfigError("config must be a JSON object of dotted keys");
  for (const auto& [key, value] : flat.items()) {
    auto it = registry().find(key);
    if (it == registry().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(base, value);
  }
  sync_derived(base);
  return base;
}

void apply_assignment(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  cfg = from_json(nlohmann::json{{key, value}}, cfg);
}

void apply_environment(RunConfig& cfg) {
  if (const char* s = std::getenv("MOEX_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw ConfigError(std::string("MOEX_SEED is not an unsigned integer: '") + s + "'");
    cfg.train.seed = v;
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : registry()) keys.push_back(k);
  return keys;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  const auto text = io::read_file(path);
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + ": not valid JSON");
  try {
    return from_json(j, std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

unsigned thread_budget() {
  if (const char* s = std::getenv("MOEX_THREADS"); s && *s) {
    const long v = std::strtol(s, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return 1;
}

}  // namespace moex
