#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "commands.hpp"
#include "moex/error.hpp"
#include "moex/training.hpp"

namespace {

using namespace moex;
using namespace moex::cli;

// Every config key with its default, shown under --help.
std::string config_footer() {
  const auto defaults = to_json(RunConfig{});
  std::string s = "Config keys (file or --set key=value; flags override the file, MOEX_SEED overrides train.seed):\n";
  for (const auto& key : config_keys()) s += "  " + key + " = " + defaults.at(key).dump() + "\n";
  return s;
}

struct ConfigFlags {
  std::optional<std::string> file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "Config file: JSON object with flat dotted keys");
    app->add_option("--set", sets, "Override one key, e.g. --set model.n_layer=2 (repeatable)");
    app->footer(config_footer());
  }
  RunConfig resolve(RunConfig base = {}) const { return resolve_config(std::move(base), file, sets); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moex: sparse mixture-of-experts language models on chess movetext"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  // ingest
  IngestOptions ingest;
  std::size_t max_games = 0;
  ConfigFlags ingest_cfg;
  auto* c_ingest = app.add_subcommand("ingest", "Tokenize movetext, align boards, split 99/1 by game");
  c_ingest->add_option("--pgn", ingest.pgn, "Movetext or PGN file (written first when --generate is set)")->required();
  c_ingest->add_option("--out", ingest.out, "Dataset directory")->required();
  c_ingest->add_option("--max-games", max_games, "Keep at most N games (0 keeps all)");
  c_ingest->add_option("--generate", ingest.generate, "Write N synthetic games (seeded by train.seed) to --pgn first");
  ingest_cfg.attach(c_ingest);

  // train
  TrainOptions train;
  ConfigFlags train_cfg;
  std::size_t stop_at = 0;
  auto* c_train = app.add_subcommand("train", "Train a dense or MoE model; writes checkpoints and metrics.csv");
  c_train->add_option("--data", train.data, "Ingested dataset directory")->required();
  c_train->add_option("--out", train.out, "Run directory")->required();
  c_train->add_option("--resume", train.resume, "Continue from this checkpoint");
  c_train->add_option("--upcycle", train.upcycle, "Seed every expert from this dense checkpoint");
  c_train->add_option("--stop-at", stop_at, "Stop after this many iterations (0 runs to train.max_iters)");
  c_train->add_flag("--quiet", train.quiet, "No progress lines");
  train_cfg.attach(c_train);

  // harvest
  HarvestOptions harvest;
  std::size_t layer = 0;
  bool layer_set = false;
  auto* c_harvest = app.add_subcommand("harvest", "Record MLP hidden activations at board alignment points");
  c_harvest->add_option("--ckpt", harvest.ckpt, "Checkpoint")->required();
  c_harvest->add_option("--data", harvest.data, "Ingested dataset directory")->required();
  auto* layer_opt = c_harvest->add_option("--layer", layer, "Layer index (default n_layer-2)");
  c_harvest->add_option("--split", harvest.split, "Games to harvest")->check(CLI::IsMember({"train", "val", "all"}));
  c_harvest->add_option("--out", harvest.out, "Activation dataset file")->required();
  c_harvest->add_option("--scatter", harvest.scatter, "Also write gate-score vs L0 rows here (MoE only)");

  // interp
  InterpOptions interp_opts;
  ConfigFlags interp_cfg;
  std::uint64_t baseline_seed = 0;
  auto* c_interp = app.add_subcommand("interp", "Coverage and board reconstruction scores");
  c_interp->add_option("--activations", interp_opts.activations, "Activation dataset file")->required();
  c_interp->add_option("--out", interp_opts.out, "Report directory")->required();
  auto* baseline_opt =
      c_interp->add_option("--shuffled-baseline", baseline_seed, "Also score a label-shuffled copy with this seed");
  interp_cfg.attach(c_interp);

  // bench-router
  BenchOptions bench;
  auto* c_bench = app.add_subcommand("bench-router", "Time the routers over a shape grid and fit the cost model");
  c_bench->add_option("--shapes", bench.shapes, "Grid, e.g. N=1024,2048;M=8;D=512,1024;d=512");
  c_bench->add_option("--routers", bench.routers, "all, or a comma list of topk_linear,sparsity_aware,bruteforce_l0");
  c_bench->add_option("--out", bench.out, "CSV path; the fit goes to <out>.fit.json")->required();
  c_bench->add_option("--reps", bench.min_reps, "Minimum repetitions per cell");
  c_bench->add_option("--min-seconds", bench.min_seconds, "Keep repeating a cell until this much time is measured");
  c_bench->add_option("--seed", bench.seed, "Seed for the random inputs");

  // report
  ReportOptions report;
  auto* c_report = app.add_subcommand("report", "Merge run outputs into plot-ready CSVs");
  c_report->add_option("--runs", report.runs, "Run directories")->required();
  c_report->add_option("--out", report.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (c_ingest->parsed()) {
      ingest.cfg = ingest_cfg.resolve();
      if (max_games > 0) ingest.max_games = max_games;
      const auto s = cmd_ingest(ingest);
      std::printf("games %zu (dropped %zu), tokens %zu, points %zu, train/val games %zu/%zu\n", s.games, s.dropped,
                  s.tokens, s.points, s.train_games, s.val_games);
    } else if (c_train->parsed()) {
      RunConfig base;
      if (train.resume) base = from_json(load_checkpoint(*train.resume).config);
      train.cfg = train_cfg.resolve(base);
      if (stop_at > 0) train.stop_at = stop_at;
      const auto s = cmd_train(train);
      std::printf("stopped at iteration %zu, checkpoint %s\n", s.iter, s.checkpoint.c_str());
    } else if (c_harvest->parsed()) {
      layer_set = layer_opt->count() > 0;
      if (layer_set) harvest.layer = layer;
      const auto s = cmd_harvest(harvest);
      std::printf("rows %zu, width %zu, mean L0 %.2f, dropped points %zu\n", s.rows, s.width, s.mean_l0, s.dropped);
    } else if (c_interp->parsed()) {
      interp_opts.config_file = interp_cfg.file;
      interp_opts.assignments = interp_cfg.sets;
      if (baseline_opt->count() > 0) interp_opts.shuffled_baseline_seed = baseline_seed;
      cmd_interp(interp_opts);
    } else if (c_bench->parsed()) {
      cmd_bench_router(bench);
    } else if (c_report->parsed()) {
      const auto s = cmd_report(report);
      std::printf("metrics rows %zu, coverage rows %zu, scatter rows %zu\n", s.metrics_rows, s.size_rows,
                  s.scatter_rows);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
