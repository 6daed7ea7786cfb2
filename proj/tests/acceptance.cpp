// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Exits 1 when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "autodiff_cases.hpp"
#include "chess_oracle.hpp"
#include "commands.hpp"
#include "interp_oracle.hpp"
#include "model_fd.hpp"
#include "moex/chess.hpp"
#include "moex/gradcheck.hpp"
#include "moex/interp.hpp"
#include "moex/moe.hpp"
#include "moex/pgn.hpp"
#include "moex/training.hpp"

namespace fs = std::filesystem;
using namespace moex;

namespace {

// Pinned tolerances and limits.
constexpr double kFlattenRelTol = 1e-6;
constexpr double kEstimatorSigmas = 3.0;
constexpr double kMaxPearson = -0.8;
constexpr double kOpFdTol = 1e-4;
constexpr double kModelFdTol = 1e-3;
constexpr double kMinR2 = 0.9;
constexpr double kMinBruteRatio = 5.0;
constexpr double kBalanceLambda = 0.001;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <typename T>
Tensor<T> randn(Shape s, std::mt19937_64& rng, double scale = 1.0, double mean = 0.0) {
  std::normal_distribution<double> n(mean, scale);
  Tensor<T> t(std::move(s));
  for (auto& v : t.storage()) v = static_cast<T>(n(rng));
  return t;
}

// Encoder rows drawn column-wise from N(mu_c, var_c), the model the
// estimator assumes.
ExpertParams<double> gaussian_expert(const TensorD& mu, const TensorD& var, std::size_t hidden, std::mt19937_64& rng) {
  const std::size_t d = mu.size();
  ExpertParams<double> e{TensorD({hidden, d}), TensorD({d, hidden})};
  for (std::size_t r = 0; r < hidden; ++r)
    for (std::size_t c = 0; c < d; ++c)
      e.w_enc.at(r, c) = std::normal_distribution<double>(mu[c], std::sqrt(var[c]))(rng);
  return e;
}

TensorD random_variances(std::size_t d, std::mt19937_64& rng) {
  TensorD var({d});
  for (auto& v : var.storage()) v = std::uniform_real_distribution<double>(0.2, 1.5)(rng);
  return var;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------

Outcome flattening() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> small(1, 16);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = small(rng) / 2 + 1, d = small(rng) * 2, hidden = small(rng) * 4;
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, m)(rng);
    std::vector<ExpertParams<float>> experts;
    for (std::size_t j = 0; j < m; ++j)
      experts.push_back({randn<float>({hidden, d}, rng, 1.0, 0.3 * (double(j) - double(m) / 2)), randn<float>({d, hidden}, rng)});
    const TensorF x = randn<float>({d}, rng);
    const auto span = std::span<const ExpertParams<float>>(experts);
    const auto g = trial % 2 ? topk_linear_gate(x, randn<float>({m, d}, rng), k) : [&] {
      std::vector<RouterStats<float>> stats;
      for (const auto& e : experts) stats.push_back(compute_router_stats(e));
      return sparsity_aware_gate(x, std::span<const RouterStats<float>>(stats), k);
    }();
    const auto moe = moe_forward(x, span, g, Activation::kRelu);
    const auto flat = flatten_to_sparse_mlp(span, g, x, Activation::kRelu);
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < d; ++i) {
      diff = std::max(diff, double(std::abs(flat.y[i] - moe.y[i])));
      scale = std::max(scale, double(std::abs(moe.y[i])));
    }
    worst = std::max(worst, diff / std::max(scale, 1e-30));
  }
  return {worst <= kFlattenRelTol, fmt("100 configs, max rel err %.2e (limit %.0e)", worst, kFlattenRelTol)};
}

Outcome estimator() {
  std::mt19937_64 rng(202);
  const std::size_t d = 32, hidden = 1024, draws = 200;
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const TensorD mu = randn<double>({d}, rng, 0.2);
    const TensorD var = random_variances(d, rng);
    const TensorD x = randn<double>({d}, rng);
    const double est = estimate_expected_l0(x, RouterStats<double>{mu, var}, hidden);
    double total = 0;
    for (std::size_t r = 0; r < draws; ++r) total += double(exact_l0(x, gaussian_expert(mu, var, hidden, rng)));
    const double p = est / double(hidden);
    const double sigma = std::sqrt(double(hidden) * p * (1 - p) / double(draws));
    worst = std::max(worst, std::abs(total / double(draws) - est) / sigma);
  }
  return {worst <= kEstimatorSigmas,
          fmt("20 cases at D=1024, worst deviation %.2f sigma (limit %.0f)", worst, kEstimatorSigmas)};
}

Outcome anticorrelation() {
  std::mt19937_64 rng(303);
  const std::size_t d = 32, hidden = 256, m = 8, tokens = 1000;
  std::vector<ExpertParams<double>> experts;
  std::vector<RouterStats<double>> stats;
  for (std::size_t j = 0; j < m; ++j) {
    const TensorD mu = randn<double>({d}, rng, 0.2);
    experts.push_back(gaussian_expert(mu, random_variances(d, rng), hidden, rng));
    stats.push_back(compute_router_stats(experts.back()));
  }
  std::vector<double> scores, l0s;
  for (std::size_t t = 0; t < tokens; ++t) {
    const TensorD x = randn<double>({d}, rng);
    const auto g = sparsity_aware_gate(x, std::span<const RouterStats<double>>(stats), 1);
    for (std::size_t j = 0; j < m; ++j) {
      scores.push_back(g.raw_scores[j]);
      l0s.push_back(double(exact_l0(x, experts[j])));
    }
  }
  const double r = pearson(scores, l0s);
  return {r <= kMaxPearson, fmt("1000 tokens x 8 experts, r = %.4f (limit %.1f)", r, kMaxPearson)};
}

Outcome gradients() {
  const auto cases = opcases::op_cases();
  double op_worst = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    std::mt19937_64 rng(1000 + i);
    for (int point = 0; point < 10; ++point) {
      TensorD x = opcases::away_from_zero(cases[i].shape, rng);
      if (cases[i].positive)
        for (auto& v : x.storage()) v = std::abs(v) + 0.1;
      op_worst = std::max(op_worst, finite_difference_check(cases[i].f, x));
    }
  }
  double model_worst = 0;
  model_worst = std::max(model_worst, modelfd::end_to_end_fd_error(modelfd::small_dense(Activation::kGelu), 20));
  model_worst = std::max(model_worst, modelfd::end_to_end_fd_error(modelfd::small_dense(Activation::kRelu), 23));
  model_worst = std::max(model_worst, modelfd::end_to_end_fd_error(modelfd::small_moe(RouterKind::kTopkLinear), 21));
  model_worst = std::max(model_worst, modelfd::end_to_end_fd_error(modelfd::small_moe(RouterKind::kSparsityAware), 22));
  return {op_worst <= kOpFdTol && model_worst <= kModelFdTol,
          fmt("%zu ops worst %.2e (limit %.0e), 2-layer models worst %.2e (limit %.0e)", cases.size(), op_worst,
              kOpFdTol, model_worst, kModelFdTol)};
}

Outcome chess_truth() {
  const std::uint64_t expected[] = {20, 400, 8902, 197281};
  const auto start = chess::Board::initial();
  const auto ref = oracle::from_fen(start.to_fen());
  bool ok = true;
  std::string counts;
  for (int depth = 1; depth <= 4; ++depth) {
    const auto ours = chess::perft(start, depth);
    ok = ok && ours == expected[depth - 1] && oracle::perft(ref, depth) == ours;
    counts += (depth > 1 ? "/" : "") + std::to_string(ours);
  }
  std::string corpus;
  for (const auto& line : chess::generate_games(100, 4242)) corpus += line + "\n";
  std::size_t errors = 0, positions = 0, mismatched = 0;
  for (const auto& game : chess::parse_pgn(corpus)) {
    try {
      for (const auto& board : chess::replay(game)) {
        ++positions;
        // Every position along the way has the same legal move count under
        // the independent generator.
        mismatched += board.legal_moves().size() != oracle::legal_moves(oracle::from_fen(board.to_fen())).size();
      }
    } catch (const std::exception&) {
      ++errors;
    }
  }
  const auto vocab = chess::build_vocab(corpus);
  std::size_t vocab_size = 0;
  for (char c : vocab.chars()) vocab_size += c != '\n';
  ok = ok && errors == 0 && mismatched == 0 && vocab_size <= 32;
  return {ok, fmt("perft %s, 100 games replayed with %zu errors, %zu/%zu positions disagree with oracle, vocab %zu (limit 32)",
                  counts.c_str(), errors, mismatched, positions, vocab_size)};
}

// Random nonnegative features loosely tied to labels, a share exactly zero.
interp::ActivationDataset random_instance(std::size_t rows, std::size_t features, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::bernoulli_distribution zero(0.4), on(0.4);
  interp::ActivationDataset d(features);
  std::vector<float> row(features);
  for (std::size_t r = 0; r < rows; ++r) {
    chess::BspVector label;
    for (std::size_t b = 0; b < 12; ++b) label[b] = on(rng);
    for (std::size_t f = 0; f < features; ++f) row[f] = zero(rng) ? 0.0f : u(rng) + (label[f % 12] ? 0.5f : 0.0f);
    d.add_row(row, label, static_cast<std::uint32_t>(r / 2));
  }
  return d;
}

Outcome metric_oracles() {
  using namespace moex::interp;
  const auto grid = default_threshold_grid();
  const auto bsps = all_bsps();
  std::size_t cov_mismatch = 0, rec_mismatch = 0, rescale_mismatch = 0;
  const int instances = 20;
  for (int i = 0; i < instances; ++i) {
    auto d = random_instance(50, 20, 500 + i);
    cov_mismatch += coverage(d, bsps).mean != oracle::coverage_direct(d, grid);
    d.assign_splits_by_game(0.8, 600 + i);
    const auto train = d.subset(Split::kTrain), test = d.subset(Split::kTest);
    const auto rep = reconstruction(test, fit_high_precision_index(train, bsps));
    rec_mismatch += rep.per_sample != oracle::reconstruction_direct(train, test, grid, kDefaultMinFire, kDefaultPrecision);
    const auto cov_before = coverage(d, bsps);
    auto scaled = d;
    for (std::size_t f = 0; f < 20; ++f) scaled.scale_feature(f, 0.25f + 0.5f * static_cast<float>(f));
    const auto rec_after = reconstruction(scaled.subset(Split::kTest), fit_high_precision_index(scaled.subset(Split::kTrain), bsps));
    rescale_mismatch += !(coverage(scaled, bsps) == cov_before) || rec_after.per_sample != rep.per_sample;
  }
  // One indicator column per BSP.
  std::mt19937_64 rng(700);
  std::bernoulli_distribution on(0.3);
  ActivationDataset ind(kNumBsp);
  std::vector<float> row(kNumBsp);
  for (std::size_t r = 0; r < 400; ++r) {
    chess::BspVector label;
    for (std::size_t b = 0; b < 40; ++b) label[b] = on(rng);
    for (std::size_t b = 0; b < kNumBsp; ++b) row[b] = label[b] ? 1.0f : 0.0f;
    ind.add_row(row, label, static_cast<std::uint32_t>(r / 4));
  }
  const double perfect_cov = coverage(ind, bsps).mean;
  ind.assign_splits_by_game(0.8, 701);
  const double perfect_rec =
      reconstruction(ind.subset(Split::kTest), fit_high_precision_index(ind.subset(Split::kTrain), bsps)).mean;
  const bool ok = cov_mismatch == 0 && rec_mismatch == 0 && rescale_mismatch == 0 && perfect_cov == 1.0 && perfect_rec == 1.0;
  return {ok, fmt("%d instances: %zu coverage / %zu reconstruction oracle mismatches, %zu rescale changes; "
                  "indicators score %.3f / %.3f",
                  instances, cov_mismatch, rec_mismatch, rescale_mismatch, perfect_cov, perfect_rec)};
}

Outcome load_balance() {
  const std::size_t m = 4, n = 8;
  const double alpha = kBalanceLambda;
  TensorD uniform({n, m}, 0.25);
  std::vector<std::size_t> spread(n);
  for (std::size_t t = 0; t < n; ++t) spread[t] = t % m;
  const double lu = alpha * load_balance_loss(uniform, std::span<const std::size_t>(spread));
  TensorD onehot({n, m}, 0.0);
  for (std::size_t t = 0; t < n; ++t) onehot.at(t, 1) = 1.0;
  const std::vector<std::size_t> collapsed(n, 1);
  const double lc = alpha * load_balance_loss(onehot, std::span<const std::size_t>(collapsed));
  bool ok = lu == alpha && lc == alpha * double(m);

  std::string seeds;
  double on_sum = 0, off_sum = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ToyMoEConfig c;
    c.router = RouterKind::kSparsityAware;
    c.identical_experts = true;
    c.experts = 4;
    c.top_k = 2;
    c.steps = 500;
    c.init_seed = seed;
    c.data_seed = seed + 100;
    c.balance_lambda = 0;
    const double off = run_toy_moe(c).mean_fraction_std;
    c.balance_lambda = kBalanceLambda;
    const double on = run_toy_moe(c).mean_fraction_std;
    on_sum += on;
    off_sum += off;
    seeds += fmt(" %.4f<%.4f", on, off);
  }
  ok = ok && on_sum < off_sum;
  return {ok, fmt("uniform %.4g (want %.4g), collapsed %.4g (want %.4g); fraction std with/without balance:%s",
                  lu, alpha, lc, alpha * double(m), seeds.c_str())};
}

Outcome sparsity_trend() {
  bool ok = true;
  std::string seeds;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ToyMoEConfig c;
    c.steps = 500;
    c.init_seed = seed;
    c.data_seed = seed + 100;
    c.router = RouterKind::kSparsityAware;
    const double sparse = run_toy_moe(c).final_l0;
    c.router = RouterKind::kTopkLinear;
    const double topk = run_toy_moe(c).final_l0;
    ok = ok && sparse <= topk;
    seeds += fmt(" %.2f<=%.2f", sparse, topk);
  }
  return {ok, fmt("final L0 sparsity-aware vs top-k per seed:%s", seeds.c_str())};
}

Outcome router_complexity(const fs::path& dir) {
  cli::BenchOptions o;
  o.out = (dir / "bench.csv").string();
  o.quiet = true;
  const auto s = cli::cmd_bench_router(o);
  bool ok = true;
  std::string fits;
  for (const auto& f : s.fits) {
    ok = ok && f.r2 >= kMinR2;
    fits += fmt(" %s %.3f", f.router.c_str(), f.r2);
  }
  double brute = 0, sparse = 0;
  for (const auto& r : s.rows) {
    if (r.shape.n != 4096 || r.shape.m != 8 || r.shape.hidden != 2048 || r.shape.width != 512) continue;
    if (r.router == "bruteforce_l0") brute = r.mean_ms;
    if (r.router == "sparsity_aware") sparse = r.mean_ms;
  }
  const double ratio = sparse > 0 ? brute / sparse : 0;
  ok = ok && s.fits.size() == 3 && ratio >= kMinBruteRatio;
  return {ok, fmt("R2:%s (limit %.1f); brute/sparsity at 4096/8/2048/512 = %.1fx (limit %.0fx)", fits.c_str(), kMinR2,
                  ratio, kMinBruteRatio)};
}

RunConfig toy_run_config() {
  RunConfig c;
  c.model.n_layer = 2;
  c.model.n_head = 4;
  c.model.d_model = 64;
  c.model.ctx_len = 128;
  c.model.dense.alpha = 1.0;
  c.model.dense.activation = Activation::kRelu;
  c.model.moe.num_experts = 4;
  c.model.moe.top_k = 2;
  c.model.moe.expert_hidden = 64;
  c.model.moe.model_width = 64;
  c.model.moe.router = RouterKind::kSparsityAware;
  c.model.moe.balance_lambda = kBalanceLambda;
  c.train.batch_size = 8;
  c.train.warmup_iters = 20;
  c.train.max_iters = 200;
  c.train.init_lr = 1e-3;
  c.train.min_lr = 1e-4;
  c.train.eval_interval = 100;
  c.train.ckpt_interval = 200;
  c.train.seed = 1337;
  return c;
}

Outcome toy_reproduction(const fs::path& dir) {
  const RunConfig dense_cfg = toy_run_config();
  cli::IngestOptions ingest;
  ingest.pgn = (dir / "games.txt").string();
  ingest.out = (dir / "data").string();
  ingest.generate = 1000;
  ingest.cfg = dense_cfg;
  const auto is = cli::cmd_ingest(ingest);

  cli::TrainOptions dense;
  dense.cfg = dense_cfg;
  dense.data = ingest.out;
  dense.out = (dir / "dense").string();
  dense.quiet = true;
  const auto ds = cli::cmd_train(dense);

  cli::TrainOptions moe;
  moe.cfg = dense_cfg;
  moe.cfg.model.mlp_kind = MlpKind::kMoE;
  moe.data = ingest.out;
  moe.out = (dir / "moe").string();
  moe.upcycle = ds.checkpoint;
  moe.quiet = true;
  const auto ms = cli::cmd_train(moe);

  cli::HarvestOptions harvest;
  harvest.ckpt = ms.checkpoint;
  harvest.data = ingest.out;
  harvest.split = "all";
  harvest.out = (dir / "moe.act").string();
  const auto hs = cli::cmd_harvest(harvest);

  cli::InterpOptions interp;
  interp.activations = harvest.out;
  interp.out = (dir / "report").string();
  interp.shuffled_baseline_seed = 1;
  interp.quiet = true;
  const auto rep = cli::cmd_interp(interp);
  const bool produced = fs::exists(dir / "report" / cli::kCoverageJson) && fs::exists(dir / "report" / cli::kReconstructionJson);
  const double baseline = rep.baseline_coverage.value_or(1.0);
  return {produced && rep.coverage > baseline,
          fmt("%zu games, dense %zu + MoE %zu steps, %zu rows x %zu; coverage %.4f vs shuffled %.4f, reconstruction %.4f",
              is.games, ds.iter, ms.iter, hs.rows, hs.width, rep.coverage, baseline, rep.reconstruction)};
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / ("moex_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const std::vector<Criterion> criteria{
      {1, "flattening equivalence", 10, flattening},
      {2, "L0 estimator fidelity", 60, estimator},
      {3, "gate/L0 anti-correlation", 30, anticorrelation},
      {4, "gradient integrity", 120, gradients},
      {5, "chess ground truth", 60, chess_truth},
      {6, "metric oracles", 30, metric_oracles},
      {7, "load-balance loss", 0, load_balance},
      {8, "sparsity-regularization trend", 0, sparsity_trend},
      {9, "router complexity", 300, [&] { return router_complexity(dir); }},
      {10, "end-to-end toy reproduction", 900, [&] { return toy_reproduction(dir); }},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s <= 0 || s < c.limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    const std::string budget = c.limit_s > 0 ? fmt("%.1f s (limit %.0f s)", s, c.limit_s) : fmt("%.1f s", s);
    std::printf("criterion %2d %s  %s: %s; %s\n", c.id, pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), budget.c_str());
    std::fflush(stdout);
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
