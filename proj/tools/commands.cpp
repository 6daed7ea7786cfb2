#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>

#include "moex/error.hpp"
#include "moex/io.hpp"
#include "moex/moe.hpp"
#include "moex/training.hpp"
#include "moex/transformer.hpp"

namespace moex::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kTokensMagic = "MOEXTOKS";
constexpr std::string_view kAlignMagic = "MOEXALGN";
constexpr std::uint16_t kFormatVersion = 1;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// Rethrows with a location prefix, keeping the exit code.
[[noreturn]] void rethrow_at(const std::string& where, const Error& e) { throw Error(where + ": " + e.what(), e.code()); }

// Movetext with PGN headers spans several lines per game: a new header
// group starts the next game. Plain movetext keeps one game per line.
std::vector<std::pair<std::size_t, std::string>> game_lines(const std::string& raw) {
  std::vector<std::pair<std::size_t, std::string>> out;
  const bool has_headers = raw.rfind('[', 0) == 0 || raw.find("\n[") != std::string::npos;
  if (!has_headers) {
    std::istringstream in(raw);
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
      std::string clean = chess::strip_pgn_markup(line);
      while (!clean.empty() && clean.back() == '\n') clean.pop_back();
      if (!clean.empty()) out.emplace_back(line_no, clean);
    }
    return out;
  }
  std::istringstream in(raw);
  std::string line, block;
  std::size_t line_no = 0, block_start = 1;
  bool block_has_moves = false;
  auto flush = [&] {
    std::string clean = chess::strip_pgn_markup(block);
    std::replace(clean.begin(), clean.end(), '\n', ' ');
    while (!clean.empty() && clean.back() == ' ') clean.pop_back();
    if (!clean.empty()) out.emplace_back(block_start, clean);
    block.clear();
    block_has_moves = false;
  };
  while (std::getline(in, line)) {
    ++line_no;
    const bool header = !line.empty() && line[0] == '[';
    if (header && block_has_moves) flush();
    if (block.empty()) block_start = line_no;
    if (!header && line.find_first_not_of(" \t\r") != std::string::npos) block_has_moves = true;
    block += line + "\n";
  }
  flush();
  return out;
}

json header_json(const std::string& text) {
  if (text.empty()) return json();
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json();
  }
}

std::vector<std::uint32_t> iota_games(std::size_t n) {
  std::vector<std::uint32_t> v(n);
  std::iota(v.begin(), v.end(), 0u);
  return v;
}

}  // namespace

json artifact_meta(const std::string& command, const json& config, const std::map<std::string, std::string>& inputs) {
  json in = json::object();
  for (const auto& [path, hash] : inputs) in[path] = hash;
  return {{"tool", "moex"}, {"command", command}, {"config", config}, {"inputs", in}};
}

std::string hash_file(const std::string& path) { return io::git_blob_sha1(io::read_file(path)); }

std::string csv_meta_line(const json& meta) { return "# moex " + meta.dump() + "\n"; }

std::vector<std::string> csv_data_lines(const std::string& text, std::string* header) {
  std::vector<std::string> rows;
  std::istringstream in(text);
  std::string line;
  bool seen_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!seen_header) {
      seen_header = true;
      if (header) *header = line;
      continue;
    }
    rows.push_back(line);
  }
  return rows;
}

RunConfig resolve_config(RunConfig base, const std::optional<std::string>& file,
                         const std::vector<std::string>& assignments) {
  RunConfig cfg = file ? load_config(*file, base) : base;
  for (const auto& a : assignments) apply_assignment(cfg, a);
  apply_environment(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// ingest

IngestSummary cmd_ingest(const IngestOptions& opts) {
  opts.cfg.validate();
  if (opts.generate > 0) {
    std::string corpus;
    for (const auto& line : chess::generate_games(opts.generate, opts.cfg.train.seed)) corpus += line + "\n";
    io::write_file(opts.pgn, corpus);
  }
  const std::string raw = io::read_file(opts.pgn);
  const chess::Vocab vocab = chess::movetext_vocab();

  IngestSummary sum;
  io::BinaryWriter ids, align;
  std::vector<std::uint64_t> offsets;
  std::vector<std::uint32_t> lengths;
  std::uint64_t n_points = 0;
  for (const auto& [line_no, line] : game_lines(raw)) {
    if (opts.max_games && sum.games >= *opts.max_games) break;
    const std::string where = opts.pgn + ": line " + std::to_string(line_no);
    std::vector<chess::Game> games;
    try {
      games = chess::parse_pgn(line);
    } catch (const Error& e) {
      rethrow_at(where, e);
    }
    for (const auto& g : games) {
      if (opts.max_games && sum.games >= *opts.max_games) break;
      if (g.moves.empty()) continue;
      if (g.result == "1/2-1/2" || g.result == "*") {
        ++sum.dropped;
        continue;
      }
      try {
        // Canonical text so alignment offsets index the stored tokens.
        const std::string canon = chess::serialize_game(g);
        const auto tokens = chess::tokenize(canon, vocab);
        const auto points = chess::align_tokens_to_boards(chess::parse_pgn(canon).at(0));
        const auto game_id = static_cast<std::uint32_t>(sum.games);
        offsets.push_back(sum.tokens);
        lengths.push_back(static_cast<std::uint32_t>(tokens.size()));
        ids.bytes(std::string_view(reinterpret_cast<const char*>(tokens.data()), tokens.size()));
        for (const auto& p : points) {
          align.u32(game_id);
          align.u32(static_cast<std::uint32_t>(p.token_index));
          const auto packed = chess::pack_bsp(chess::board_to_bsp(p.board));
          align.bytes(std::string_view(reinterpret_cast<const char*>(packed.data()), packed.size()));
        }
        n_points += points.size();
        sum.tokens += tokens.size();
        ++sum.games;
      } catch (const Error& e) {
        rethrow_at(where, e);
      }
    }
  }
  if (sum.games == 0) throw Error(opts.pgn + ": no usable games");
  sum.points = n_points;

  // Seeded split by game.
  auto order = iota_games(sum.games);
  std::mt19937_64 rng(opts.cfg.train.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = 0;
  if (sum.games >= 2) {
    n_val = static_cast<std::size_t>(std::llround(opts.cfg.val_fraction * static_cast<double>(sum.games)));
    n_val = std::clamp<std::size_t>(n_val, 1, sum.games - 1);
  }
  std::vector<std::uint32_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::uint32_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  sum.train_games = train.size();
  sum.val_games = val.size();

  const json meta = artifact_meta("ingest", to_json(opts.cfg), {{opts.pgn, io::git_blob_sha1(raw)}});

  io::BinaryWriter tok;
  tok.bytes(kTokensMagic);
  tok.u16(kFormatVersion);
  tok.str(meta.dump());
  tok.str(vocab.chars());
  tok.u32(static_cast<std::uint32_t>(sum.games));
  for (std::size_t g = 0; g < sum.games; ++g) {
    tok.u64(offsets[g]);
    tok.u32(lengths[g]);
  }
  tok.u64(sum.tokens);
  tok.bytes(ids.data());

  io::BinaryWriter al;
  al.bytes(kAlignMagic);
  al.u16(kFormatVersion);
  al.str(meta.dump());
  al.u64(n_points);
  al.bytes(align.data());

  json vj = {{"meta", meta}, {"chars", vocab.chars()}, {"size", vocab.size()}};
  json sj = {{"meta", meta},
             {"seed", opts.cfg.train.seed},
             {"val_fraction", opts.cfg.val_fraction},
             {"train", train},
             {"val", val}};

  fs::create_directories(opts.out);
  io::write_file(join_path(opts.out, kTokensFile), tok.data());
  io::write_file(join_path(opts.out, kAlignFile), al.data());
  io::write_file(join_path(opts.out, kVocabFile), vj.dump(2) + "\n");
  io::write_file(join_path(opts.out, kSplitFile), sj.dump(2) + "\n");
  return sum;
}

std::vector<std::uint8_t> Corpus::stream(const std::vector<std::uint32_t>& games) const {
  std::vector<std::uint8_t> out;
  for (auto g : games) {
    const auto* p = ids.data() + offsets.at(g);
    out.insert(out.end(), p, p + lengths.at(g));
  }
  return out;
}

Corpus load_corpus(const std::string& dir) {
  Corpus c;
  const std::string tok_path = join_path(dir, kTokensFile), align_path = join_path(dir, kAlignFile),
                    split_path = join_path(dir, kSplitFile);
  const std::string tok_bytes = io::read_file(tok_path), align_bytes = io::read_file(align_path),
                    split_text = io::read_file(split_path);
  c.input_hashes[tok_path] = io::git_blob_sha1(tok_bytes);
  c.input_hashes[align_path] = io::git_blob_sha1(align_bytes);
  c.input_hashes[split_path] = io::git_blob_sha1(split_text);

  io::BinaryReader r(tok_bytes, tok_path);
  r.expect_magic(kTokensMagic);
  if (const auto v = r.u16(); v != kFormatVersion)
    throw FormatError(tok_path + ": unsupported version " + std::to_string(v));
  r.str();
  c.vocab = chess::Vocab(r.str());
  const std::uint32_t n_games = r.u32();
  for (std::uint32_t g = 0; g < n_games; ++g) {
    c.offsets.push_back(r.u64());
    c.lengths.push_back(r.u32());
  }
  const std::uint64_t n_tokens = r.u64();
  const auto body = r.bytes(n_tokens);
  if (!r.done()) throw FormatError(tok_path + ": trailing bytes");
  c.ids.assign(body.begin(), body.end());
  for (std::uint32_t g = 0; g < n_games; ++g)
    if (c.offsets[g] + c.lengths[g] > n_tokens) throw FormatError(tok_path + ": game " + std::to_string(g) + " out of range");
  for (auto id : c.ids)
    if (id >= c.vocab.size()) throw FormatError(tok_path + ": token id " + std::to_string(id) + " outside vocabulary");

  io::BinaryReader a(align_bytes, align_path);
  a.expect_magic(kAlignMagic);
  if (const auto v = a.u16(); v != kFormatVersion)
    throw FormatError(align_path + ": unsupported version " + std::to_string(v));
  a.str();
  const std::uint64_t n_points = a.u64();
  c.points.reserve(n_points);
  for (std::uint64_t i = 0; i < n_points; ++i) {
    Corpus::Point p;
    p.game = a.u32();
    p.token_index = a.u32();
    p.bsp = chess::unpack_bsp(reinterpret_cast<const std::uint8_t*>(a.bytes(chess::kBspSize / 8).data()));
    if (p.game >= n_games || p.token_index > c.lengths[p.game])
      throw FormatError(align_path + ": point " + std::to_string(i) + " outside its game");
    c.points.push_back(p);
  }
  if (!a.done()) throw FormatError(align_path + ": trailing bytes");

  try {
    const json sj = json::parse(split_text);
    c.train = sj.at("train").get<std::vector<std::uint32_t>>();
    c.val = sj.at("val").get<std::vector<std::uint32_t>>();
  } catch (const json::exception& e) {
    throw FormatError(split_path + ": " + e.what());
  }
  for (auto g : c.train)
    if (g >= n_games) throw FormatError(split_path + ": game " + std::to_string(g) + " out of range");
  for (auto g : c.val)
    if (g >= n_games) throw FormatError(split_path + ": game " + std::to_string(g) + " out of range");
  return c;
}

// ---------------------------------------------------------------------------
// train

namespace {

std::string metrics_line(const MetricsRow& m) {
  return std::to_string(m.iter) + "," + fmt(m.lr) + "," + fmt(m.loss_lm) + "," + fmt(m.loss_balance) + "," +
         (m.loss_val ? fmt(*m.loss_val) : std::string()) + "\n";
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::vector<MetricsRow> rows;
  if (!fs::exists(path)) return rows;
  for (const auto& line : csv_data_lines(io::read_file(path))) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 5) throw FormatError(path + ": bad metrics row '" + line + "'");
    MetricsRow m;
    m.iter = std::stoull(cells[0]);
    m.lr = std::stod(cells[1]);
    m.loss_lm = std::stod(cells[2]);
    m.loss_balance = std::stod(cells[3]);
    if (!cells[4].empty()) m.loss_val = std::stod(cells[4]);
    rows.push_back(m);
  }
  return rows;
}

}  // namespace

TrainSummary cmd_train(const TrainOptions& opts) {
  RunConfig cfg = opts.cfg;
  cfg.validate();
  if (opts.resume && opts.upcycle) throw ConfigError("--resume and --upcycle are mutually exclusive");

  const Corpus corpus = load_corpus(opts.data);
  if (corpus.vocab.size() > cfg.model.vocab_size)
    throw ConfigError("model.vocab_size " + std::to_string(cfg.model.vocab_size) + " is smaller than the dataset vocabulary of " +
                      std::to_string(corpus.vocab.size()));
  const std::size_t seq = cfg.model.ctx_len, batch = cfg.train.batch_size;
  const auto train_stream = corpus.stream(corpus.train);
  const auto val_stream = corpus.stream(corpus.val);
  if (train_stream.size() <= seq)
    throw Error(opts.data + ": training split has " + std::to_string(train_stream.size()) + " tokens, need more than " +
                std::to_string(seq));
  const bool have_val = val_stream.size() > seq;
  if (!have_val && !opts.quiet)
    std::fprintf(stderr, "warning: validation split shorter than one window; loss_val left empty\n");

  auto inputs = corpus.input_hashes;
  std::optional<Trainer> trainer;
  WindowSampler sampler(train_stream, seq, cfg.train.seed);
  std::vector<MetricsRow> metrics;
  const std::string metrics_path = join_path(opts.out, kMetricsFile);

  if (opts.resume) {
    inputs[*opts.resume] = hash_file(*opts.resume);
    Checkpoint ck = load_checkpoint(*opts.resume);
    trainer.emplace(cfg.model, cfg.train, std::move(ck.params));
    trainer->restore(ck.iter, std::move(ck.adam));
    sampler.set_rng_state(ck.rng);
    for (const auto& m : read_metrics(metrics_path))
      if (m.iter < ck.iter) metrics.push_back(m);
  } else if (opts.upcycle) {
    inputs[*opts.upcycle] = hash_file(*opts.upcycle);
    const Checkpoint dense = load_checkpoint(*opts.upcycle);
    const RunConfig dense_cfg = from_json(dense.config);
    if (dense_cfg.model.mlp_kind != MlpKind::kDense) throw ConfigError(*opts.upcycle + ": not a dense checkpoint");
    if (cfg.model.mlp_kind != MlpKind::kMoE) throw ConfigError("--upcycle needs model.mlp=moe");
    trainer.emplace(cfg.model, cfg.train,
                    upcycle_from_dense(dense_cfg.model, dense.params, cfg.model, cfg.train.seed));
  } else {
    trainer.emplace(cfg.model, cfg.train);
  }

  const json meta = artifact_meta("train", to_json(cfg), inputs);
  fs::create_directories(opts.out);
  auto save = [&](const std::string& path) {
    Checkpoint ck;
    ck.config = to_json(cfg);
    ck.iter = trainer->iter();
    ck.params = trainer->model().params();
    ck.adam = trainer->optimizer();
    ck.rng = sampler.rng_state();
    save_checkpoint(path, ck);
    std::string csv = csv_meta_line(meta) + kMetricsHeader + "\n";
    for (const auto& m : metrics) csv += metrics_line(m);
    io::write_file(metrics_path, csv);
  };
  auto val_loss = [&]() {
    WindowSampler vs(val_stream, seq, cfg.train.seed + 1);
    std::vector<int> in, tg;
    double total = 0;
    for (std::size_t b = 0; b < cfg.train.eval_batches; ++b) {
      vs.sample(batch, in, tg);
      total += trainer->eval_loss(in, tg, batch, seq);
    }
    return total / static_cast<double>(cfg.train.eval_batches);
  };

  const std::size_t end = std::min(cfg.train.max_iters, opts.stop_at.value_or(cfg.train.max_iters));
  std::vector<int> in, tg;
  TrainSummary sum;
  while (trainer->iter() < end) {
    sampler.sample(batch, in, tg);
    const StepResult r = trainer->step(in, tg, batch, seq);
    MetricsRow m{r.iter, r.lr, r.loss_lm, r.loss_balance, std::nullopt};
    const std::size_t done = trainer->iter();
    if (have_val && (done % cfg.train.eval_interval == 0 || done == cfg.train.max_iters)) m.loss_val = val_loss();
    metrics.push_back(m);
    if (!opts.quiet && (m.loss_val || done == end))
      std::printf("iter %zu lr %.3g loss %.4f balance %.4f%s\n", r.iter, r.lr, r.loss_lm, r.loss_balance,
                  m.loss_val ? (" val " + fmt(*m.loss_val)).c_str() : "");
    if (done % cfg.train.ckpt_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%07zu.ckpt", done);
      save(join_path(opts.out, name));
    }
  }
  sum.checkpoint = join_path(opts.out, kLastCheckpoint);
  save(sum.checkpoint);
  sum.iter = trainer->iter();
  sum.metrics = std::move(metrics);
  return sum;
}

// ---------------------------------------------------------------------------
// harvest

HarvestSummary cmd_harvest(const HarvestOptions& opts) {
  const std::string ckpt_bytes = io::read_file(opts.ckpt);
  const Checkpoint ck = decode_checkpoint(ckpt_bytes, opts.ckpt);
  const RunConfig cfg = from_json(ck.config);
  const ModelConfig& mc = cfg.model;
  const std::size_t layer = opts.layer.value_or(mc.n_layer >= 2 ? mc.n_layer - 2 : 0);
  if (layer >= mc.n_layer)
    throw ConfigError("layer " + std::to_string(layer) + " out of range for a " + std::to_string(mc.n_layer) +
                      "-layer model");
  const Corpus corpus = load_corpus(opts.data);
  std::vector<std::uint32_t> games;
  if (opts.split == "train") games = corpus.train;
  else if (opts.split == "val") games = corpus.val;
  else if (opts.split == "all") games = iota_games(corpus.offsets.size());
  else throw ConfigError("unknown split '" + opts.split + "' (expected train, val or all)");

  const Model<float> model(mc, ck.params);
  const bool moe = mc.mlp_kind == MlpKind::kMoE;
  const bool want_scatter = opts.scatter && moe;
  const std::size_t width = mc.hidden_width();
  const int delimiter = corpus.vocab.id_of(';');
  if (delimiter < 0) throw FormatError(opts.data + ": vocabulary lacks ';'");

  // Points per game, in ply order.
  std::map<std::uint32_t, std::vector<const Corpus::Point*>> by_game;
  for (const auto& p : corpus.points) by_game[p.game].push_back(&p);

  interp::ActivationDataset data(width);
  HarvestSummary sum;
  sum.width = width;
  std::string scatter;
  double nonzero = 0;
  for (auto g : games) {
    // A trailing ';' gives the final ply's alignment point a token.
    std::vector<int> tokens(corpus.ids.begin() + static_cast<std::ptrdiff_t>(corpus.offsets[g]),
                            corpus.ids.begin() + static_cast<std::ptrdiff_t>(corpus.offsets[g] + corpus.lengths[g]));
    tokens.push_back(delimiter);
    if (tokens.size() > mc.ctx_len) tokens.resize(mc.ctx_len);
    std::vector<std::size_t> positions;
    std::vector<const Corpus::Point*> kept;
    for (const auto* p : by_game[g]) {
      if (p->token_index < tokens.size()) {
        positions.push_back(p->token_index);
        kept.push_back(p);
      } else {
        ++sum.dropped;
      }
    }
    if (positions.empty()) continue;
    Tape<float> tape(false);
    tape.set_grad_enabled(false);
    ForwardOptions fo;
    fo.trace_layer = layer;
    fo.trace_gate_scores = want_scatter;
    const auto fp = model.forward(tape, tokens, 1, tokens.size(), fo);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const float* row = fp.trace.data() + positions[i] * width;
      const std::size_t row_id = data.rows();
      data.add_row(std::span<const float>(row, width), kept[i]->bsp, g);
      for (std::size_t c = 0; c < width; ++c) nonzero += row[c] != 0.0f;
      if (want_scatter) {
        const std::size_t m = mc.moe.num_experts, hidden = mc.moe.expert_hidden;
        const float* scores = fp.trace_scores.data() + positions[i] * m;
        for (std::size_t e = 0; e < m; ++e) {
          std::size_t l0 = 0;
          for (std::size_t c = 0; c < hidden; ++c) l0 += row[e * hidden + c] != 0.0f;
          // Unselected experts have an all-zero block and no measured L0.
          if (l0 == 0) continue;
          scatter += std::to_string(row_id) + "," + std::to_string(e) + "," + fmt(scores[e]) + "," +
                     std::to_string(l0) + "\n";
        }
      }
    }
  }
  sum.rows = data.rows();
  sum.mean_l0 = sum.rows ? nonzero / static_cast<double>(sum.rows) : 0.0;
  data.assign_splits_by_game(cfg.interp.train_fraction, cfg.train.seed);

  auto inputs = corpus.input_hashes;
  inputs[opts.ckpt] = io::git_blob_sha1(ckpt_bytes);
  const json meta = artifact_meta("harvest", to_json(cfg), inputs);
  const json header = {{"meta", meta},
                       {"layer", layer},
                       {"split", opts.split},
                       {"mlp", moe ? "moe" : "dense"},
                       {"width", width},
                       {"rows", sum.rows},
                       {"dropped_points", sum.dropped},
                       {"mean_l0", sum.mean_l0},
                       {"active_mlp_params", mc.active_mlp_params()}};
  interp::save_dataset(opts.out, data, header.dump());
  if (want_scatter) io::write_file(*opts.scatter, csv_meta_line(meta) + kScatterHeader + "\n" + scatter);
  return sum;
}

// ---------------------------------------------------------------------------
// interp

InterpSummary cmd_interp(const InterpOptions& opts) {
  const std::string bytes = io::read_file(opts.activations);
  std::string header_text;
  const interp::ActivationDataset data = interp::load_dataset(opts.activations, &header_text);
  const json header = header_json(header_text);
  RunConfig base;
  if (header.is_object() && header.contains("meta")) base = from_json(header["meta"]["config"]);
  const RunConfig cfg = resolve_config(base, opts.config_file, opts.assignments);
  cfg.interp.validate();
  for (auto s : {interp::Split::kTrain, interp::Split::kTest})
    if (!data.has_split(s))
      throw Error(opts.activations + ": missing " + (s == interp::Split::kTrain ? "train" : "test") + " split");

  interp::ScoreOptions so;
  so.grid = cfg.interp.grid();
  so.min_fire = cfg.interp.min_fire;
  so.min_precision = cfg.interp.min_precision;
  so.threads = thread_budget();
  const auto bsps = interp::all_bsps();
  const auto cov = interp::coverage(data, bsps, so);
  const auto train = data.subset(interp::Split::kTrain), test = data.subset(interp::Split::kTest);
  const auto index = interp::fit_high_precision_index(train, bsps, so);
  const auto rec = interp::reconstruction(test, index);

  InterpSummary sum;
  sum.coverage = cov.mean;
  sum.reconstruction = rec.mean;
  if (opts.shuffled_baseline_seed) {
    auto shuffled = data;
    shuffled.shuffle_labels(*opts.shuffled_baseline_seed);
    sum.baseline_coverage = interp::coverage(shuffled, bsps, so).mean;
  }

  const json meta = artifact_meta("interp", to_json(cfg), {{opts.activations, io::git_blob_sha1(bytes)}});
  json cj = {{"meta", meta}, {"coverage", interp::to_json(cov)}, {"rows", data.rows()}, {"width", data.features()}};
  for (const char* key : {"layer", "mlp", "mean_l0", "active_mlp_params"})
    if (header.is_object() && header.contains(key)) cj[key] = header[key];
  if (sum.baseline_coverage) cj["shuffled_baseline"] = {{"seed", *opts.shuffled_baseline_seed}, {"mean", *sum.baseline_coverage}};
  const json rj = {{"meta", meta},
                   {"reconstruction", interp::to_json(rec)},
                   {"classifiers", index.size()},
                   {"train_rows", train.rows()},
                   {"test_rows", test.rows()}};
  fs::create_directories(opts.out);
  io::write_file(join_path(opts.out, kCoverageJson), cj.dump(2) + "\n");
  io::write_file(join_path(opts.out, kCoverageCsv), csv_meta_line(meta) + interp::coverage_csv(cov));
  io::write_file(join_path(opts.out, kReconstructionJson), rj.dump(2) + "\n");
  if (!opts.quiet) {
    std::printf("coverage       %.3f\n", sum.coverage);
    std::printf("reconstruction %.3f\n", sum.reconstruction);
    if (sum.baseline_coverage) std::printf("shuffled-label coverage %.3f\n", *sum.baseline_coverage);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// bench-router

std::vector<BenchShape> parse_shapes(const std::string& spec) {
  std::map<std::string, std::vector<std::size_t>> axes;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("shape spec: expected key=values in '" + part + "'");
    const std::string key = part.substr(0, eq);
    if (key != "N" && key != "M" && key != "D" && key != "d")
      throw ConfigError("shape spec: unknown axis '" + key + "' (expected N, M, D or d)");
    std::stringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      std::size_t used = 0;
      unsigned long long x = 0;
      try {
        x = std::stoull(v, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != v.size() || v.empty() || x == 0) throw ConfigError("shape spec: bad value '" + v + "' for " + key);
      axes[key].push_back(x);
    }
  }
  for (const char* k : {"N", "M", "D", "d"})
    if (axes[k].empty()) throw ConfigError(std::string("shape spec: axis ") + k + " missing");
  std::vector<BenchShape> out;
  for (auto n : axes["N"])
    for (auto m : axes["M"])
      for (auto h : axes["D"])
        for (auto d : axes["d"]) out.push_back({n, m, h, d});
  return out;
}

CostFit fit_cost_model(const std::string& router, const std::vector<double>& cost, const std::vector<double>& ms) {
  CostFit f;
  f.router = router;
  const std::size_t n = cost.size();
  if (n < 2 || ms.size() != n) return f;
  const double mx = std::accumulate(cost.begin(), cost.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (cost[i] - mx) * (cost[i] - mx);
    sxy += (cost[i] - mx) * (ms[i] - my);
    syy += (ms[i] - my) * (ms[i] - my);
  }
  if (sxx == 0) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = ms[i] - (f.slope * cost[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = syy > 0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

BenchSummary cmd_bench_router(const BenchOptions& opts) {
  std::vector<RouterKind> routers;
  if (opts.routers == "all") {
    routers = {RouterKind::kTopkLinear, RouterKind::kSparsityAware, RouterKind::kBruteforceL0};
  } else {
    std::stringstream ss(opts.routers);
    std::string name;
    while (std::getline(ss, name, ',')) routers.push_back(parse_router(name));
  }
  const auto shapes = parse_shapes(opts.shapes);
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto random_tensor = [&](std::size_t r, std::size_t c, float scale) {
    TensorF t({r, c});
    for (auto& v : t.storage()) v = scale * normal(rng);
    return t;
  };

  BenchSummary sum;
  for (const auto& s : shapes) {
    const float enc_scale = 1.0f / std::sqrt(static_cast<float>(s.width));
    const TensorF x = random_tensor(s.n, s.width, 1.0f);
    std::vector<ExpertParams<float>> experts;
    for (std::size_t j = 0; j < s.m; ++j) {
      TensorF enc = random_tensor(s.hidden, s.width, enc_scale);
      // A per-expert bias on the weights spreads the expected sparsity.
      for (auto& v : enc.storage()) v += 0.1f * enc_scale * static_cast<float>(j);
      experts.push_back({std::move(enc), TensorF({s.width, s.hidden})});
    }
    const TensorF gate = random_tensor(s.m, s.width, 0.02f);
    const std::size_t k = std::min<std::size_t>(2, s.m);
    for (auto kind : routers) {
      std::vector<double> times;
      double total = 0;
      route_batch(x, experts, &gate, kind, k);  // warm-up
      while (times.size() < opts.min_reps || (total < opts.min_seconds && times.size() < 200)) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = route_batch(x, experts, &gate, kind, k);
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (r.selected.empty()) throw NumericError("bench: empty routing");
        times.push_back(sec * 1e3);
        total += sec;
      }
      const double mean = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(times.size());
      double var = 0;
      for (double t : times) var += (t - mean) * (t - mean);
      const double sd = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;
      sum.rows.push_back({std::string(router_name(kind)), s, mean, sd, times.size()});
      if (!opts.quiet)
        std::printf("%-15s N=%-6zu M=%-3zu D=%-6zu d=%-5zu %10.3f ms  (sd %.3f, %zu reps)\n",
                    std::string(router_name(kind)).c_str(), s.n, s.m, s.hidden, s.width, mean, sd, times.size());
    }
  }
  for (auto kind : routers) {
    std::vector<double> cost, ms;
    for (const auto& r : sum.rows) {
      if (r.router != router_name(kind)) continue;
      cost.push_back(router_cost_model(static_cast<double>(r.shape.n), static_cast<double>(r.shape.m),
                                       static_cast<double>(r.shape.hidden), static_cast<double>(r.shape.width), kind));
      ms.push_back(r.mean_ms);
    }
    sum.fits.push_back(fit_cost_model(std::string(router_name(kind)), cost, ms));
    if (!opts.quiet) std::printf("fit %-15s R^2 = %.4f\n", sum.fits.back().router.c_str(), sum.fits.back().r2);
  }

  if (!opts.out.empty()) {
    RunConfig cfg;
    cfg.train.seed = opts.seed;
    json config = to_json(cfg);
    config["bench.shapes"] = opts.shapes;
    config["bench.routers"] = opts.routers;
    config["bench.min_reps"] = opts.min_reps;
    const json meta = artifact_meta("bench-router", config, {});
    std::string csv = csv_meta_line(meta) + kBenchHeader + "\n";
    for (const auto& r : sum.rows)
      csv += r.router + "," + std::to_string(r.shape.n) + "," + std::to_string(r.shape.m) + "," +
             std::to_string(r.shape.hidden) + "," + std::to_string(r.shape.width) + "," + fmt(r.mean_ms) + "," +
             fmt(r.std_ms) + "\n";
    io::write_file(opts.out, csv);
    json fits = json::array();
    for (const auto& f : sum.fits)
      fits.push_back({{"router", f.router}, {"slope_ms_per_op", f.slope}, {"intercept_ms", f.intercept}, {"r2", f.r2}});
    io::write_file(opts.out + ".fit.json", json({{"meta", meta}, {"fits", fits}}).dump(2) + "\n");
  }
  return sum;
}

// ---------------------------------------------------------------------------
// report

ReportSummary cmd_report(const ReportOptions& opts) {
  if (opts.runs.empty()) throw ConfigError("report: no run directories given");
  std::vector<std::string> missing;
  for (const auto& dir : opts.runs) {
    if (!fs::is_directory(dir)) {
      missing.push_back(dir + " (not a directory)");
      continue;
    }
    bool any = false;
    for (const char* f : {kMetricsFile, kCoverageJson, kScatterFile}) any = any || fs::exists(join_path(dir, f));
    if (!any)
      missing.push_back(dir + " (no " + kMetricsFile + ", " + kCoverageJson + " or " + kScatterFile + ")");
  }
  if (!missing.empty()) {
    std::string msg = "report: missing inputs:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw Error(msg);
  }

  std::map<std::string, std::string> inputs;
  std::string metrics = std::string("run,") + kMetricsHeader + "\n";
  std::string size = "run,width,active_mlp_params,coverage,reconstruction\n";
  std::string l0 = "run,mean_l0,coverage\n";
  std::string scatter = std::string(kScatterHeader) + "\n";
  ReportSummary sum;
  for (const auto& dir : opts.runs) {
    const std::string run = fs::path(dir).lexically_normal().filename().string().empty()
                                ? fs::path(dir).lexically_normal().parent_path().filename().string()
                                : fs::path(dir).lexically_normal().filename().string();
    if (const auto p = join_path(dir, kMetricsFile); fs::exists(p)) {
      const std::string text = io::read_file(p);
      inputs[p] = io::git_blob_sha1(text);
      for (const auto& line : csv_data_lines(text)) {
        metrics += run + "," + line + "\n";
        ++sum.metrics_rows;
      }
    }
    if (const auto p = join_path(dir, kCoverageJson); fs::exists(p)) {
      const std::string text = io::read_file(p);
      inputs[p] = io::git_blob_sha1(text);
      json cj;
      try {
        cj = json::parse(text);
      } catch (const json::parse_error& e) {
        throw FormatError(p + ": " + e.what());
      }
      const double cov = interp::coverage_from_json(cj.at("coverage")).mean;
      std::string rec;
      if (const auto rp = join_path(dir, kReconstructionJson); fs::exists(rp)) {
        const std::string rt = io::read_file(rp);
        inputs[rp] = io::git_blob_sha1(rt);
        rec = fmt(interp::reconstruction_from_json(json::parse(rt).at("reconstruction")).mean);
      }
      const std::string active = cj.contains("active_mlp_params") ? std::to_string(cj["active_mlp_params"].get<std::size_t>()) : "";
      size += run + "," + std::to_string(cj.at("width").get<std::size_t>()) + "," + active + "," + fmt(cov) + "," + rec + "\n";
      ++sum.size_rows;
      const std::string mean_l0 = cj.contains("mean_l0") ? fmt(cj["mean_l0"].get<double>()) : "";
      l0 += run + "," + mean_l0 + "," + fmt(cov) + "\n";
      ++sum.l0_rows;
    }
    if (const auto p = join_path(dir, kScatterFile); fs::exists(p)) {
      const std::string text = io::read_file(p);
      inputs[p] = io::git_blob_sha1(text);
      std::string header;
      const auto lines = csv_data_lines(text, &header);
      if (header != kScatterHeader) throw FormatError(p + ": expected header " + kScatterHeader);
      for (const auto& line : lines) scatter += line + "\n";
      sum.scatter_rows += lines.size();
    }
  }

  json config = to_json(RunConfig{});
  config["report.runs"] = opts.runs;
  const std::string meta = csv_meta_line(artifact_meta("report", config, inputs));
  fs::create_directories(opts.out);
  io::write_file(join_path(opts.out, "metrics.csv"), meta + metrics);
  io::write_file(join_path(opts.out, "coverage_vs_size.csv"), meta + size);
  io::write_file(join_path(opts.out, "coverage_vs_l0.csv"), meta + l0);
  io::write_file(join_path(opts.out, "gate_scatter.csv"), meta + scatter);
  return sum;
}

}  // namespace moex::cli
