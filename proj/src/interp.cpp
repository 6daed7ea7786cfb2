#include "moex/interp.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "moex/error.hpp"
#include "moex/io.hpp"

namespace moex::interp {

std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int i = 0; i < 10; ++i) g.push_back(i / 10.0);
  return g;
}

ActivationDataset::ActivationDataset(std::size_t features) : features_(features), f_max_(features, 0.0f) {}

void ActivationDataset::add_row(std::span<const float> values, const chess::BspVector& label, std::uint32_t game,
                                Split split) {
  if (values.size() != features_)
    throw DimensionError("activation row has " + std::to_string(values.size()) + " features, dataset has " +
                         std::to_string(features_));
  values_.insert(values_.end(), values.begin(), values.end());
  for (std::size_t f = 0; f < features_; ++f) f_max_[f] = std::max(f_max_[f], values[f]);
  labels_.push_back(label);
  games_.push_back(game);
  splits_.push_back(split);
}

std::vector<float> ActivationDataset::column(std::size_t f) const {
  std::vector<float> out(rows());
  for (std::size_t r = 0; r < rows(); ++r) out[r] = value(r, f);
  return out;
}

ActivationDataset ActivationDataset::subset(Split s) const {
  ActivationDataset out(features_);
  for (std::size_t r = 0; r < rows(); ++r)
    if (splits_[r] == s) out.add_row(row(r), labels_[r], games_[r], s);
  return out;
}

bool ActivationDataset::has_split(Split s) const {
  return std::find(splits_.begin(), splits_.end(), s) != splits_.end();
}

void ActivationDataset::assign_splits_by_game(double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train fraction must lie in (0, 1)");
  const std::set<std::uint32_t> distinct(games_.begin(), games_.end());
  std::vector<std::uint32_t> order(distinct.begin(), distinct.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(order.size())));
  if (order.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, order.size() - 1);
  const std::set<std::uint32_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  for (std::size_t r = 0; r < rows(); ++r) splits_[r] = train.count(games_[r]) ? Split::kTrain : Split::kTest;
}

void ActivationDataset::shuffle_labels(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(labels_.begin(), labels_.end(), rng);
}

void ActivationDataset::scale_feature(std::size_t f, float c) {
  if (!(c > 0)) throw ConfigError("feature scale must be positive");
  f_max_[f] = 0;
  for (std::size_t r = 0; r < rows(); ++r) {
    values_[r * features_ + f] *= c;
    f_max_[f] = std::max(f_max_[f], values_[r * features_ + f]);
  }
}

std::vector<std::uint8_t> binarize(std::span<const float> column, double t) {
  float f_max = 0;
  for (float v : column) f_max = std::max(f_max, v);
  const double cut = t * static_cast<double>(f_max);
  std::vector<std::uint8_t> out(column.size());
  for (std::size_t i = 0; i < column.size(); ++i) out[i] = f_max > 0 && static_cast<double>(column[i]) > cut;
  return out;
}

double f1_from_counts(std::size_t true_pos, std::size_t pred_pos, std::size_t truth_pos) {
  if (pred_pos == 0 && truth_pos == 0) return 1.0;
  return 2.0 * static_cast<double>(true_pos) / static_cast<double>(pred_pos + truth_pos);
}

double f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size())
    throw DimensionError("f1: " + std::to_string(pred.size()) + " predictions for " + std::to_string(truth.size()) +
                         " labels");
  std::size_t tp = 0, pp = 0, tt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    tp += pred[i] && truth[i];
    pp += pred[i] != 0;
    tt += truth[i] != 0;
  }
  return f1_from_counts(tp, pp, tt);
}

std::vector<std::uint16_t> all_bsps() {
  std::vector<std::uint16_t> out(kNumBsp);
  std::iota(out.begin(), out.end(), std::uint16_t{0});
  return out;
}

namespace {

// Row bitsets for every (feature, threshold) classifier and every label.
class FiringTable {
 public:
  FiringTable(const ActivationDataset& data, std::span<const double> grid)
      : features_(data.features()), grid_(grid.size()), words_((data.rows() + 63) / 64) {
    if (grid.empty()) throw ConfigError("threshold grid is empty");
    for (double t : grid)
      if (!(t >= 0 && t <= 1)) throw ConfigError("threshold " + std::to_string(t) + " outside [0, 1]");
    fire_.assign(features_ * grid_ * words_, 0);
    fire_count_.assign(features_ * grid_, 0);
    label_.assign(kNumBsp * words_, 0);
    label_count_.assign(kNumBsp, 0);
    const auto& f_max = data.f_max();
    for (std::size_t r = 0; r < data.rows(); ++r) {
      const std::uint64_t bit = std::uint64_t{1} << (r % 64);
      const std::size_t w = r / 64;
      const auto row = data.row(r);
      for (std::size_t f = 0; f < features_; ++f) {
        if (!(f_max[f] > 0)) continue;
        const double v = row[f];
        for (std::size_t g = 0; g < grid_; ++g)
          if (v > grid[g] * static_cast<double>(f_max[f])) {
            fire_[(f * grid_ + g) * words_ + w] |= bit;
            ++fire_count_[f * grid_ + g];
          }
      }
      const auto& label = data.label(r);
      for (std::size_t b = 0; b < kNumBsp; ++b)
        if (label[b]) {
          label_[b * words_ + w] |= bit;
          ++label_count_[b];
        }
    }
  }

  std::size_t fire_count(std::size_t f, std::size_t g) const { return fire_count_[f * grid_ + g]; }
  std::size_t label_count(std::size_t b) const { return label_count_[b]; }

  std::size_t true_positives(std::size_t f, std::size_t g, std::size_t b) const {
    const std::uint64_t* a = fire_.data() + (f * grid_ + g) * words_;
    const std::uint64_t* l = label_.data() + b * words_;
    std::size_t n = 0;
    for (std::size_t w = 0; w < words_; ++w) n += static_cast<std::size_t>(std::popcount(a[w] & l[w]));
    return n;
  }

  std::size_t features() const { return features_; }
  std::size_t grid() const { return grid_; }

 private:
  std::size_t features_, grid_, words_;
  std::vector<std::uint64_t> fire_, label_;
  std::vector<std::size_t> fire_count_, label_count_;
};

ProbeResult best_from_table(const FiringTable& table, std::size_t bsp, std::span<const double> grid) {
  ProbeResult best{0, grid[0], -1.0};
  const std::size_t truth = table.label_count(bsp);
  for (std::size_t f = 0; f < table.features(); ++f) {
    for (std::size_t g = 0; g < table.grid(); ++g) {
      const std::size_t fire = table.fire_count(f, g);
      const std::size_t tp = truth == 0 || fire == 0 ? 0 : table.true_positives(f, g, bsp);
      const double score = f1_from_counts(tp, fire, truth);
      if (score > best.f1) best = {static_cast<std::uint32_t>(f), grid[g], score};
    }
    if (best.f1 == 1.0) break;
  }
  if (table.features() == 0) best.f1 = f1_from_counts(0, 0, truth);
  return best;
}

// Runs fn(i) for i in [0, n) over up to `threads` workers; each index is
// handled by exactly one worker, so per-index outputs stay deterministic.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

void check_bsp(std::size_t b) {
  if (b >= kNumBsp) throw DimensionError("BSP index " + std::to_string(b) + " outside [0, 768)");
}

}  // namespace

ProbeResult best_f1_for_bsp(const ActivationDataset& data, std::size_t bsp, std::span<const double> grid) {
  check_bsp(bsp);
  return best_from_table(FiringTable(data, grid), bsp, grid);
}

CoverageReport coverage(const ActivationDataset& data, std::span<const std::uint16_t> bsps, const ScoreOptions& opts) {
  for (auto b : bsps) check_bsp(b);
  const FiringTable table(data, opts.grid);
  CoverageReport rep;
  rep.bsps.assign(bsps.begin(), bsps.end());
  rep.best.resize(bsps.size());
  parallel_for(bsps.size(), opts.threads, [&](std::size_t i) { rep.best[i] = best_from_table(table, bsps[i], opts.grid); });
  double sum = 0;
  for (const auto& b : rep.best) sum += b.f1;
  rep.mean = bsps.empty() ? 0.0 : sum / static_cast<double>(bsps.size());
  return rep;
}

std::size_t HighPrecisionIndex::size() const {
  std::size_t n = 0;
  for (const auto& v : by_bsp) n += v.size();
  return n;
}

HighPrecisionIndex fit_high_precision_index(const ActivationDataset& train, std::span<const std::uint16_t> bsps,
                                            const ScoreOptions& opts) {
  for (auto b : bsps) check_bsp(b);
  const FiringTable table(train, opts.grid);
  HighPrecisionIndex index;
  index.features = train.features();
  parallel_for(bsps.size(), opts.threads, [&](std::size_t i) {
    const std::size_t b = bsps[i];
    auto& out = index.by_bsp[b];
    if (table.label_count(b) == 0) return;
    for (std::size_t f = 0; f < table.features(); ++f)
      for (std::size_t g = 0; g < table.grid(); ++g) {
        const std::size_t fire = table.fire_count(f, g);
        if (fire == 0 || fire < opts.min_fire) continue;
        const double precision = static_cast<double>(table.true_positives(f, g, b)) / static_cast<double>(fire);
        if (precision >= opts.min_precision - 1e-12)
          out.push_back({static_cast<std::uint32_t>(f), opts.grid[g],
                         opts.grid[g] * static_cast<double>(train.f_max()[f])});
      }
  });
  return index;
}

chess::BspVector predict_board(std::span<const float> row, const HighPrecisionIndex& index) {
  if (row.size() != index.features)
    throw DimensionError("row has " + std::to_string(row.size()) + " features, index was fit on " +
                         std::to_string(index.features));
  chess::BspVector out;
  for (std::size_t b = 0; b < kNumBsp; ++b)
    for (const auto& c : index.by_bsp[b])
      if (static_cast<double>(row[c.feature]) > c.cut) {
        out.set(b);
        break;
      }
  return out;
}

ReconstructionReport reconstruction(const ActivationDataset& test, const HighPrecisionIndex& index) {
  ReconstructionReport rep;
  rep.per_sample.reserve(test.rows());
  double sum = 0;
  for (std::size_t r = 0; r < test.rows(); ++r) {
    const auto pred = predict_board(test.row(r), index);
    const auto& truth = test.label(r);
    const double s = f1_from_counts((pred & truth).count(), pred.count(), truth.count());
    rep.per_sample.push_back(s);
    sum += s;
  }
  rep.mean = test.rows() ? sum / static_cast<double>(test.rows()) : 0.0;
  return rep;
}

nlohmann::json to_json(const CoverageReport& rep) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < rep.bsps.size(); ++i)
    per.push_back({{"bsp", rep.bsps[i]},
                   {"best_feature", rep.best[i].feature},
                   {"best_t", rep.best[i].threshold},
                   {"f1", rep.best[i].f1}});
  return {{"mean", rep.mean}, {"per_bsp", per}};
}

nlohmann::json to_json(const ReconstructionReport& rep) {
  return {{"mean", rep.mean}, {"per_sample", rep.per_sample}};
}

CoverageReport coverage_from_json(const nlohmann::json& j) {
  CoverageReport rep;
  rep.mean = j.at("mean").get<double>();
  for (const auto& e : j.at("per_bsp")) {
    rep.bsps.push_back(e.at("bsp").get<std::uint16_t>());
    rep.best.push_back({e.at("best_feature").get<std::uint32_t>(), e.at("best_t").get<double>(), e.at("f1").get<double>()});
  }
  return rep;
}

ReconstructionReport reconstruction_from_json(const nlohmann::json& j) {
  return {j.at("per_sample").get<std::vector<double>>(), j.at("mean").get<double>()};
}

std::string coverage_csv(const CoverageReport& rep) {
  std::string out = "bsp,best_feature,best_t,f1\n";
  char line[96];
  for (std::size_t i = 0; i < rep.bsps.size(); ++i) {
    std::snprintf(line, sizeof line, "%u,%u,%.17g,%.17g\n", unsigned(rep.bsps[i]), unsigned(rep.best[i].feature),
                  rep.best[i].threshold, rep.best[i].f1);
    out += line;
  }
  return out;
}

namespace {
constexpr std::string_view kDatasetMagic = "MOEXACTS";
constexpr std::uint16_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const std::string& path, const ActivationDataset& data, const std::string& header_json) {
  io::BinaryWriter w;
  w.bytes(kDatasetMagic);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.features()));
  w.u64(data.rows());
  w.str(header_json);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    w.u32(data.game(r));
    w.u8(static_cast<std::uint8_t>(data.split(r)));
    const auto packed = chess::pack_bsp(data.label(r));
    w.bytes(std::string_view(reinterpret_cast<const char*>(packed.data()), packed.size()));
    for (float v : data.row(r)) w.f32(v);
  }
  io::write_file(path, w.data());
}

ActivationDataset load_dataset(const std::string& path, std::string* header_json) {
  const std::string blob = io::read_file(path);
  io::BinaryReader r(blob, path);
  r.expect_magic(kDatasetMagic);
  if (const auto v = r.u16(); v != kDatasetVersion)
    throw FormatError(path + ": unsupported activation file version " + std::to_string(v));
  const std::size_t features = r.u32();
  const std::uint64_t rows = r.u64();
  std::string header = r.str();
  if (header_json) *header_json = std::move(header);
  ActivationDataset data(features);
  std::vector<float> row(features);
  for (std::uint64_t i = 0; i < rows; ++i) {
    const std::uint32_t game = r.u32();
    const std::uint8_t split = r.u8();
    if (split > 1) throw FormatError(path + ": row " + std::to_string(i) + " has split tag " + std::to_string(split));
    std::array<std::uint8_t, 96> packed{};
    const auto raw = r.bytes(packed.size());
    std::copy(raw.begin(), raw.end(), reinterpret_cast<char*>(packed.data()));
    for (auto& v : row) v = r.f32();
    data.add_row(row, chess::unpack_bsp(packed.data()), game, static_cast<Split>(split));
  }
  if (!r.done()) throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return data;
}

}  // namespace moex::interp
