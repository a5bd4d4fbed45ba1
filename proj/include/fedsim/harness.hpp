#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedsim/data.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

using Json = nlohmann::ordered_json;

struct DatasetConfig {
  enum class Kind { kBlobs, kCsv };
  Kind kind = Kind::kBlobs;

  std::size_t classes = 4;
  std::size_t per_class = 500;
  std::size_t dim = 16;
  double separation = 4.0;
  double noise_sd = 1.0;
  std::size_t test_per_class = 250;

  std::string path;
  std::string label_column = "label";
  // Either a separate test file or a held-out fraction of `path`.
  std::string test_path;
  double test_fraction = 0.2;
};

struct ModelConfig {
  ModelKind kind = ModelKind::kLogistic;
  std::size_t hidden = 16;
  std::size_t prompt_len = 2;
  // Backbone (adapter) or inner model (soft prompt): logistic or mlp.
  ModelKind child_kind = ModelKind::kLogistic;
  std::size_t child_hidden = 16;

  ModelSpec build(std::size_t input_dim, std::size_t classes) const;
};

enum class SummaryStat { kBest, kMedian };

struct ExperimentConfig {
  Json source;  // config document as given, echoed into reports
  DatasetConfig dataset;
  ModelConfig model;
  std::size_t clients = 10;
  PartitionScheme partition = PartitionScheme::dirichlet(0.5);
  std::optional<std::size_t> k_shot;
  // Rows per class added to every client each round from its unused private
  // data; 0 disables. Requires k_shot.
  std::size_t arrival_k = 0;
  FedConfig federation;
  std::size_t trials = 1;
  std::uint64_t base_seed = 0;
  SummaryStat summary_stat = SummaryStat::kMedian;
  std::string output;
  std::string format = "json";
};

// Throws ConfigError with a dotted field path on unknown keys, wrong types or
// out-of-range values.
ExperimentConfig parse_config(const Json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Summary {
  SummaryStat stat = SummaryStat::kMedian;
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t trial = 0;
};

// best: highest accuracy (earliest trial on ties). median: middle by accuracy,
// lower-middle for even counts.
Summary summarize(std::span<const Metrics> finals, SummaryStat stat);

struct TrialResult {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::uint64_t plan_seed = 0;
  std::uint64_t plan_fingerprint = 0;
  RoundHistory history;
};

struct ExperimentReport {
  std::string label;
  Mode mode = Mode::kFfm;
  std::optional<std::size_t> k_shot;
  std::vector<TrialResult> trials;
  Summary summary;
  CommTotals comm;
};

// Everything a trial trains and tests on, derived from (config, trial seed).
struct TrialData {
  std::shared_ptr<const Dataset> train;
  Shard test;
  PartitionPlan plan;
  ArrivalSchedule arrivals;
  std::uint64_t plan_seed = 0;
};

TrialData prepare_trial(const ExperimentConfig& config, std::uint64_t trial_seed);

ExperimentReport run_experiment(const ExperimentConfig& config);
std::vector<ExperimentReport> run_compare(const ExperimentConfig& config);
std::vector<ExperimentReport> run_sweep(const ExperimentConfig& config,
                                        std::span<const std::size_t> k_values);

struct ReportBundle {
  std::string command;
  Json config;
  std::vector<ExperimentReport> entries;
};

Json to_json(const ReportBundle& bundle);
std::string to_csv(const ReportBundle& bundle);
// format is "json" or "csv"; an empty path or "-" writes to stdout.
void emit(const ReportBundle& bundle, const std::string& format, const std::string& path);

// Exit codes: 0 success, 1 runtime error, 2 usage or config error.
int cli(int argc, const char* const* argv);

}  // namespace fedsim
