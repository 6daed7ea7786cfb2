#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/chess.hpp"
#include "moex/config.hpp"
#include "moex/interp.hpp"
#include "moex/pgn.hpp"

namespace moex::cli {

// File names inside an ingested dataset directory.
inline constexpr const char* kTokensFile = "tokens.bin";
inline constexpr const char* kVocabFile = "vocab.json";
inline constexpr const char* kAlignFile = "align.bin";
inline constexpr const char* kSplitFile = "split.json";

// File names inside a training or interp output directory.
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kLastCheckpoint = "last.ckpt";
inline constexpr const char* kCoverageJson = "coverage.json";
inline constexpr const char* kCoverageCsv = "coverage.csv";
inline constexpr const char* kReconstructionJson = "reconstruction.json";
inline constexpr const char* kScatterFile = "gate_scatter.csv";

inline constexpr const char* kMetricsHeader = "iter,lr,loss_lm,loss_balance,loss_val";
inline constexpr const char* kBenchHeader = "router,N,M,D,d,mean_ms,std_ms";
inline constexpr const char* kScatterHeader = "token_id,expert,score,l0";

/// Provenance block stored in every artifact: the effective flat config and
/// the git blob SHA-1 of each input file, keyed by path as given.
nlohmann::json artifact_meta(const std::string& command, const nlohmann::json& config,
                             const std::map<std::string, std::string>& inputs);
// git blob SHA-1 of a file's bytes.
std::string hash_file(const std::string& path);
// One "# moex {...}" line; CSV readers skip it as a comment.
std::string csv_meta_line(const nlohmann::json& meta);

// ---------------------------------------------------------------------------
// ingest

struct IngestOptions {
  std::string pgn;                      // movetext or PGN file
  std::string out;                      // dataset directory
  std::optional<std::size_t> max_games;
  std::size_t generate = 0;             // > 0: write a synthetic corpus to `pgn` first
  RunConfig cfg;
};

struct IngestSummary {
  std::size_t games = 0;    // kept
  std::size_t dropped = 0;  // results outside the vocabulary (draws, '*')
  std::size_t tokens = 0;
  std::size_t train_games = 0;
  std::size_t val_games = 0;
  std::size_t points = 0;   // alignment points
};

IngestSummary cmd_ingest(const IngestOptions& opts);

/// An ingested dataset loaded back into memory.
struct Corpus {
  chess::Vocab vocab;
  std::vector<std::uint8_t> ids;         // all games back to back
  std::vector<std::uint64_t> offsets;    // per game
  std::vector<std::uint32_t> lengths;    // per game
  std::vector<std::uint32_t> train, val; // game indices
  struct Point {
    std::uint32_t game;
    std::uint32_t token_index;
    chess::BspVector bsp;
  };
  std::vector<Point> points;             // ordered by game, then ply
  std::map<std::string, std::string> input_hashes;

  std::vector<std::uint8_t> stream(const std::vector<std::uint32_t>& games) const;
};

Corpus load_corpus(const std::string& dir);

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  RunConfig cfg;
  std::string data;                   // ingested dataset directory
  std::string out;                    // run directory
  std::optional<std::string> resume;  // checkpoint to continue from
  std::optional<std::string> upcycle; // dense checkpoint to seed experts from
  std::optional<std::size_t> stop_at; // halt after this iteration, schedule unchanged
  bool quiet = false;
};

struct MetricsRow {
  std::size_t iter = 0;
  double lr = 0, loss_lm = 0, loss_balance = 0;
  std::optional<double> loss_val;
};

struct TrainSummary {
  std::size_t iter = 0;
  std::vector<MetricsRow> metrics;
  std::string checkpoint;  // last checkpoint written
};

TrainSummary cmd_train(const TrainOptions& opts);

// Flags applied over a base config: file first, then key=value assignments,
// then the environment.
RunConfig resolve_config(RunConfig base, const std::optional<std::string>& file,
                         const std::vector<std::string>& assignments);

// ---------------------------------------------------------------------------
// harvest

struct HarvestOptions {
  std::string ckpt;
  std::string data;
  std::optional<std::size_t> layer;    // default n_layer - 2 (0 when n_layer == 1)
  std::string split = "val";           // train, val or all
  std::string out;
  std::optional<std::string> scatter;  // gate-score vs L0 rows (MoE only)
};

struct HarvestSummary {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::size_t dropped = 0;  // alignment points beyond the context window
  double mean_l0 = 0;       // mean nonzero features per row
};

HarvestSummary cmd_harvest(const HarvestOptions& opts);

// ---------------------------------------------------------------------------
// interp

struct InterpOptions {
  std::string activations;
  std::string out;  // report directory
  // Applied over the config recorded by harvest (defaults when absent).
  std::optional<std::string> config_file;
  std::vector<std::string> assignments;
  std::optional<std::uint64_t> shuffled_baseline_seed;
  bool quiet = false;
};

struct InterpSummary {
  double coverage = 0;
  double reconstruction = 0;
  std::optional<double> baseline_coverage;
};

InterpSummary cmd_interp(const InterpOptions& opts);

// ---------------------------------------------------------------------------
// bench-router

struct BenchShape {
  std::size_t n, m, hidden, width;
};

// "N=1024,2048;M=8;D=512,1024;d=512" expands to the cartesian product.
std::vector<BenchShape> parse_shapes(const std::string& spec);

struct BenchRow {
  std::string router;
  BenchShape shape;
  double mean_ms = 0, std_ms = 0;
  std::size_t reps = 0;
};

struct CostFit {
  std::string router;
  double slope = 0, intercept = 0, r2 = 0;
};

struct BenchOptions {
  std::string shapes = "N=1024,2048,4096;M=8;D=512,1024,2048;d=512";
  std::string routers = "all";
  std::string out;
  std::size_t min_reps = 3;
  double min_seconds = 1.0;  // keep repeating until this much time is measured (at most 200 reps)
  std::uint64_t seed = 1337;
  bool quiet = false;
};

struct BenchSummary {
  std::vector<BenchRow> rows;
  std::vector<CostFit> fits;
};

BenchSummary cmd_bench_router(const BenchOptions& opts);
// Least squares t = slope·cost + intercept and its R².
CostFit fit_cost_model(const std::string& router, const std::vector<double>& cost, const std::vector<double>& ms);

// ---------------------------------------------------------------------------
// report

struct ReportOptions {
  std::vector<std::string> runs;
  std::string out;
};

struct ReportSummary {
  std::size_t metrics_rows = 0;
  std::size_t size_rows = 0;
  std::size_t l0_rows = 0;
  std::size_t scatter_rows = 0;
};

ReportSummary cmd_report(const ReportOptions& opts);

// Data lines of a CSV: comment lines and the header are skipped.
std::vector<std::string> csv_data_lines(const std::string& text, std::string* header = nullptr);

}  // namespace moex::cli
