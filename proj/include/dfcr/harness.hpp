#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfcr/dataset.hpp"
#include "dfcr/gradcheck.hpp"
#include "dfcr/metrics.hpp"
#include "dfcr/model.hpp"

namespace dfcr {

struct DataSettings {
  std::string manifest;                      // existing manifest.json, or empty
  std::optional<GeneratorParams> generator;  // used when no manifest is given
  std::string directory = "data";            // where generate-data writes
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  bool stratified = true;
  std::uint64_t split_seed = 0;
};

struct TrainSettings {
  double lr = 1e-4;
  std::size_t batch_size = 16;
  std::size_t eval_batch_size = 32;
  std::size_t epochs = 100;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  /// Stop once validation OA reaches this value.
  std::optional<double> early_stop_val_oa;
  bool standardize = true;
};

struct ExperimentConfig {
  ModelConfig model;
  DataSettings data;
  TrainSettings train;
  GradcheckOptions gradcheck;
  std::vector<std::string> gradcheck_modules = dfcr::gradcheck_modules();
  std::string output_dir = "runs";
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys take defaults; unknown top-level keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::string& path);

/// FNV-1a over the canonical (key-sorted) JSON, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

struct Datasets {
  InMemoryData train, val, test;
  std::vector<std::string> class_names;
  std::optional<BandStats> stats;  // training-split statistics already applied
};
Datasets load_datasets(const ExperimentConfig& cfg);
const InMemoryData& pick(const Datasets& d, Split s);

struct RunOptions {
  bool deterministic = false;
  bool save_checkpoints = true;
  std::ostream* log = nullptr;  // per-epoch progress lines
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_oa = 0.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  double step0_loss = 0.0;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  MetricsReport val;
  MetricsReport test;
  std::size_t parameters = 0;
  std::size_t attention_parameters = 0;
  std::optional<double> wall_seconds;
  std::string checkpoint;
};

struct RunReport {
  std::string label;
  nlohmann::json settings = nlohmann::json::object();
  std::vector<SeedRun> runs;
  std::map<std::string, Aggregate> aggregate;  // over test metrics
  std::string config_hash;
  std::optional<double> wall_seconds;
};

nlohmann::json to_json(const SeedRun& r);
nlohmann::json to_json(const RunReport& r);

/// Confusion matrix over a data set, batched, without recording a graph.
ConfusionMatrix evaluate_model(const DfcrNet& model, const InMemoryData& data, std::size_t batch_size);

/// One seed: train with Adam, keep the best-validation-OA weights, evaluate
/// them on val and test. Throws NumericError naming the stage, epoch and step
/// on a non-finite loss.
SeedRun train_seed(const ExperimentConfig& cfg, const Datasets& data, std::uint64_t seed, const std::string& run_dir,
                   const RunOptions& opt);

/// All configured seeds, aggregated.
RunReport train_all(const ExperimentConfig& cfg, const Datasets& data, const std::string& label,
                    const RunOptions& opt);

/// The six toggle rows: none; GCAM; CDLM+LFEM; DFWFM; GCAM+CDLM+LFEM; all.
std::vector<AblationToggles> ablation_rows();

struct AblationResult {
  std::vector<RunReport> rows;
  /// Seeds where the full model's test OA >= the baseline's.
  std::size_t full_ge_baseline = 0;
  std::size_t seeds = 0;
};
AblationResult run_ablation(const ExperimentConfig& cfg, const Datasets& data, const RunOptions& opt);

struct ComparisonResult {
  std::vector<RunReport> rows;  // se, eca, cbam, cdlm_lfem
  std::vector<std::size_t> non_attention_parameters;
  bool controlled = true;
};
/// Throws Error when the non-attention parameter counts differ across rows.
ComparisonResult run_attention_comparison(const ExperimentConfig& cfg, const Datasets& data, const RunOptions& opt);

struct GradcheckSuite {
  std::vector<GradcheckReport> modules;
  double stop_gradient_x = 0.0;
  bool negative_control_failed = false;  // expected true
  bool passed = false;
};
GradcheckSuite run_gradcheck_suite(const ExperimentConfig& cfg);

nlohmann::json to_json(const AblationResult& r, const std::string& hash);
nlohmann::json to_json(const ComparisonResult& r, const std::string& hash);
nlohmann::json to_json(const GradcheckSuite& s, const std::string& hash);

std::string render_run(const RunReport& r);
std::string render_ablation(const AblationResult& r);
std::string render_comparison(const ComparisonResult& r);
std::string render_gradcheck(const GradcheckSuite& s);
std::string render_metrics(const MetricsReport& m, const std::vector<std::string>& class_names);

/// Shared between the CLI and the tests.
struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string checkpoint;  // evaluate
  std::string split = "test";
  bool quiet = false;
};

/// Runs one CLI command; writes <output_dir>/<command>.json and .txt and the
/// text table to `out`. Returns the process exit code.
int run_command(const std::string& command, const CommandOptions& opt, std::ostream& out, std::ostream& err);

}  // namespace dfcr
