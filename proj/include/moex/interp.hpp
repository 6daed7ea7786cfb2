#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/chess.hpp"

namespace moex::interp {

inline constexpr std::size_t kNumBsp = 768;
inline constexpr std::size_t kDefaultMinFire = 5;
inline constexpr double kDefaultPrecision = 0.95;

// {0.0, 0.1, ..., 0.9}. t = 1 never fires under the strict comparison.
std::vector<double> default_threshold_grid();

enum class Split : std::uint8_t { kTrain = 0, kTest = 1 };

/// Feature rows paired with board-state labels. f_max is the running
/// column max clamped below at 0, so a column with no positive value is dead.
class ActivationDataset {
 public:
  explicit ActivationDataset(std::size_t features = 0);

  void add_row(std::span<const float> values, const chess::BspVector& label, std::uint32_t game = 0,
               Split split = Split::kTrain);

  std::size_t rows() const { return labels_.size(); }
  std::size_t features() const { return features_; }
  std::span<const float> row(std::size_t r) const { return {values_.data() + r * features_, features_}; }
  float value(std::size_t r, std::size_t f) const { return values_[r * features_ + f]; }
  const chess::BspVector& label(std::size_t r) const { return labels_[r]; }
  std::uint32_t game(std::size_t r) const { return games_[r]; }
  Split split(std::size_t r) const { return splits_[r]; }
  const std::vector<float>& f_max() const { return f_max_; }
  const std::vector<float>& values() const { return values_; }

  std::vector<float> column(std::size_t f) const;
  ActivationDataset subset(Split s) const;
  bool has_split(Split s) const;

  // Reassigns split tags: a seeded train_fraction of distinct games go to
  // train, the rest to test.
  void assign_splits_by_game(double train_fraction, std::uint64_t seed);
  // Permutes labels across rows, breaking feature/label association.
  void shuffle_labels(std::uint64_t seed);
  // Multiplies one column by c > 0.
  void scale_feature(std::size_t f, float c);

  bool operator==(const ActivationDataset&) const = default;

 private:
  std::size_t features_;
  std::vector<float> values_;
  std::vector<chess::BspVector> labels_;
  std::vector<std::uint32_t> games_;
  std::vector<Split> splits_;
  std::vector<float> f_max_;
};

// I[f > t·f_max] with f_max the column max clamped at 0.
std::vector<std::uint8_t> binarize(std::span<const float> column, double t);

// Harmonic mean of precision and recall; both sides empty scores 1.
double f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
double f1_from_counts(std::size_t true_pos, std::size_t pred_pos, std::size_t truth_pos);

struct ProbeResult {
  std::uint32_t feature = 0;
  double threshold = 0;
  double f1 = 0;

  bool operator==(const ProbeResult&) const = default;
};

struct ScoreOptions {
  std::vector<double> grid = default_threshold_grid();
  std::size_t min_fire = kDefaultMinFire;
  double min_precision = kDefaultPrecision;
  unsigned threads = 1;
};

// Exhaustive max over features × grid; ties keep the lower feature, then
// the lower threshold.
ProbeResult best_f1_for_bsp(const ActivationDataset& data, std::size_t bsp, std::span<const double> grid);

struct CoverageReport {
  std::vector<std::uint16_t> bsps;
  std::vector<ProbeResult> best;
  double mean = 0;

  bool operator==(const CoverageReport&) const = default;
};

// Every index in [0, 768).
std::vector<std::uint16_t> all_bsps();

CoverageReport coverage(const ActivationDataset& data, std::span<const std::uint16_t> bsps,
                        const ScoreOptions& opts = {});

struct Classifier {
  std::uint32_t feature = 0;
  double threshold = 0;
  double cut = 0;  // threshold · f_max on the training split

  bool operator==(const Classifier&) const = default;
};

struct HighPrecisionIndex {
  std::size_t features = 0;
  std::vector<std::vector<Classifier>> by_bsp = std::vector<std::vector<Classifier>>(kNumBsp);

  std::size_t size() const;
  bool operator==(const HighPrecisionIndex&) const = default;
};

HighPrecisionIndex fit_high_precision_index(const ActivationDataset& train, std::span<const std::uint16_t> bsps,
                                            const ScoreOptions& opts = {});

chess::BspVector predict_board(std::span<const float> row, const HighPrecisionIndex& index);

struct ReconstructionReport {
  std::vector<double> per_sample;
  double mean = 0;

  bool operator==(const ReconstructionReport&) const = default;
};

ReconstructionReport reconstruction(const ActivationDataset& test, const HighPrecisionIndex& index);

// JSON forms reload to equal values; the CSV has one row per BSP with
// columns bsp,best_feature,best_t,f1.
nlohmann::json to_json(const CoverageReport& rep);
nlohmann::json to_json(const ReconstructionReport& rep);
CoverageReport coverage_from_json(const nlohmann::json& j);
ReconstructionReport reconstruction_from_json(const nlohmann::json& j);
std::string coverage_csv(const CoverageReport& rep);

// Binary dataset file: magic "MOEXACTS", u16 version, u32 feature count,
// u64 row count, length-prefixed JSON header, then per row u32 game, u8
// split, 96-byte packed label and the float32 values, all little-endian.
void save_dataset(const std::string& path, const ActivationDataset& data, const std::string& header_json);
ActivationDataset load_dataset(const std::string& path, std::string* header_json = nullptr);

}  // namespace moex::interp
