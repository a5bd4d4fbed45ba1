#include "fedsim/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <numeric>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/seed.hpp"

namespace fedsim {

namespace {

bool log_enabled() {
  const char* v = std::getenv("FEDSIM_LOG");
  if (v == nullptr) return false;
  const std::string_view s(v);
  return !s.empty() && s != "0" && s != "off";
}

void log_line(const std::string& msg) {
  if (log_enabled()) std::cerr << "[fedsim] " << msg << '\n';
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string stat_name(SummaryStat s) { return s == SummaryStat::kBest ? "best" : "median"; }

// Rows of `source` listed in `rows`, in that order, as a standalone dataset.
std::shared_ptr<Dataset> subset(const Dataset& source, std::span<const std::size_t> rows) {
  auto out = std::make_shared<Dataset>();
  out->dim = source.dim;
  out->classes = source.classes;
  out->features.reserve(rows.size() * source.dim);
  for (std::size_t r : rows) {
    const auto row = source.row(r);
    out->features.insert(out->features.end(), row.begin(), row.end());
    out->labels.push_back(source.labels[r]);
  }
  return out;
}

// Loaded CSV inputs, shared across trials.
struct CsvInputs {
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> test;
};

CsvInputs load_csv_inputs(const DatasetConfig& cfg) {
  CsvInputs in;
  try {
    auto train = std::make_shared<Dataset>(load_csv(cfg.path, cfg.label_column));
    train->validate();
    in.train = train;
    if (!cfg.test_path.empty()) {
      auto test = std::make_shared<Dataset>(load_csv(cfg.test_path, cfg.label_column));
      test->validate();
      if (test->dim != train->dim || test->classes != train->classes) {
        throw ConfigError("dataset.test_path: test file has " + std::to_string(test->dim) +
                          " features and " + std::to_string(test->classes) +
                          " classes; training file has " + std::to_string(train->dim) + " and " +
                          std::to_string(train->classes));
      }
      in.test = test;
    }
  } catch (const DataError& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  return in;
}

TrialData prepare_trial_impl(const ExperimentConfig& config, std::uint64_t trial_seed,
                             const CsvInputs* csv) {
  TrialData t;
  const auto& ds = config.dataset;
  if (ds.kind == DatasetConfig::Kind::kBlobs) {
    t.train = std::make_shared<const Dataset>(gen_blobs(ds.classes, ds.per_class, ds.dim, ds.separation,
                                                        ds.noise_sd, derive_seed(trial_seed, SeedRole::kData)));
    t.test = Shard::all(std::make_shared<const Dataset>(
        gen_blobs(ds.classes, ds.test_per_class, ds.dim, ds.separation, ds.noise_sd,
                  derive_seed(trial_seed, SeedRole::kTest))));
  } else {
    CsvInputs loaded;
    if (csv == nullptr) {
      loaded = load_csv_inputs(ds);
      csv = &loaded;
    }
    if (csv->test) {
      t.train = csv->train;
      t.test = Shard::all(csv->test);
    } else {
      std::vector<std::size_t> order(csv->train->rows());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(trial_seed, SeedRole::kTest));
      std::shuffle(order.begin(), order.end(), rng);
      const auto n_test = std::max<std::size_t>(
          1, static_cast<std::size_t>(ds.test_fraction * static_cast<double>(order.size())));
      if (n_test >= order.size()) throw ConfigError("dataset.test_fraction: leaves no training rows");
      std::vector<std::size_t> test_rows(order.begin(), order.begin() + n_test);
      std::vector<std::size_t> train_rows(order.begin() + n_test, order.end());
      std::sort(test_rows.begin(), test_rows.end());
      std::sort(train_rows.begin(), train_rows.end());
      t.train = subset(*csv->train, train_rows);
      t.test = Shard::all(subset(*csv->train, test_rows));
    }
  }

  t.plan_seed = derive_seed(trial_seed, SeedRole::kSplit);
  try {
    t.plan = split_public_private(t.train, config.clients, config.partition, t.plan_seed);
  } catch (const DataError& e) {
    throw ConfigError(std::string("partition: ") + e.what());
  }

  if (config.k_shot) {
    const std::size_t k = *config.k_shot;
    const auto full_private = t.plan.private_shards;
    if (!t.plan.public_shard.empty()) {
      t.plan.public_shard =
          sample_kshot(t.plan.public_shard, k, derive_seed(trial_seed, SeedRole::kKShot, 0));
    }
    for (std::size_t c = 0; c < t.plan.private_shards.size(); ++c) {
      t.plan.private_shards[c] =
          sample_kshot(full_private[c], k, derive_seed(trial_seed, SeedRole::kKShot, c + 1));
    }
    if (config.arrival_k > 0) {
      std::vector<std::vector<bool>> used(full_private.size(),
                                          std::vector<bool>(t.train->rows(), false));
      for (std::size_t c = 0; c < full_private.size(); ++c) {
        for (std::size_t r : t.plan.private_shards[c].indices) used[c][r] = true;
      }
      for (std::size_t round = 1; round <= config.federation.rounds; ++round) {
        std::vector<Shard> increments;
        for (std::size_t c = 0; c < full_private.size(); ++c) {
          Shard remaining{t.train, {}};
          for (std::size_t r : full_private[c].indices) {
            if (!used[c][r]) remaining.indices.push_back(r);
          }
          Shard inc{t.train, {}};
          if (!remaining.empty()) {
            inc = sample_kshot(remaining, config.arrival_k,
                               derive_seed(trial_seed, SeedRole::kArrival, round, c));
          }
          for (std::size_t r : inc.indices) used[c][r] = true;
          increments.push_back(std::move(inc));
        }
        t.arrivals.increments.push_back(std::move(increments));
      }
    }
  }
  return t;
}

ExperimentReport run_with(const ExperimentConfig& config, const CsvInputs* csv) {
  const auto started = std::chrono::steady_clock::now();
  ExperimentReport report;
  report.mode = config.federation.mode;
  report.label = std::string(mode_name(config.federation.mode));
  report.k_shot = config.k_shot;
  report.trials.resize(config.trials);

  auto run_trial = [&](std::size_t i) {
    const std::uint64_t trial_seed = config.base_seed + i;
    const TrialData data = prepare_trial_impl(config, trial_seed, csv);
    const ModelSpec spec = config.model.build(data.train->dim, data.train->classes);
    FedConfig fed = config.federation;
    fed.seed = trial_seed;
    TrialResult r;
    r.index = i;
    r.seed = trial_seed;
    r.plan_seed = data.plan_seed;
    r.plan_fingerprint = data.plan.fingerprint();
    r.history = run_regime(fed, data.plan, spec, data.test,
                           data.arrivals.increments.empty() ? nullptr : &data.arrivals);
    return r;
  };

  // Trials are independent; results are placed by index.
  std::vector<std::future<TrialResult>> futures;
  for (std::size_t i = 0; i < config.trials; ++i) {
    futures.push_back(std::async(std::launch::async, run_trial, i));
  }
  for (std::size_t i = 0; i < config.trials; ++i) report.trials[i] = futures[i].get();

  std::vector<Metrics> finals;
  for (const auto& t : report.trials) {
    finals.push_back(t.history.final_metrics());
    report.comm.messages += t.history.comm.messages;
    report.comm.bytes += t.history.comm.bytes;
  }
  report.summary = summarize(finals, config.summary_stat);
  const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started);
  std::ostringstream msg;
  msg << report.label << ": " << config.trials << " trial(s), " << stat_name(config.summary_stat)
      << " accuracy " << report.summary.accuracy << ", " << elapsed.count() << " s";
  log_line(msg.str());
  return report;
}

std::unique_ptr<CsvInputs> maybe_load(const ExperimentConfig& config) {
  if (config.dataset.kind != DatasetConfig::Kind::kCsv) return nullptr;
  return std::make_unique<CsvInputs>(load_csv_inputs(config.dataset));
}

}  // namespace

TrialData prepare_trial(const ExperimentConfig& config, std::uint64_t trial_seed) {
  return prepare_trial_impl(config, trial_seed, nullptr);
}

Summary summarize(std::span<const Metrics> finals, SummaryStat stat) {
  if (finals.empty()) throw std::invalid_argument("cannot summarize zero trials");
  std::vector<std::size_t> order(finals.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t pick = 0;
  if (stat == SummaryStat::kBest) {
    for (std::size_t i = 1; i < finals.size(); ++i) {
      if (finals[i].accuracy > finals[pick].accuracy) pick = i;
    }
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return finals[a].accuracy < finals[b].accuracy;
    });
    pick = order[(finals.size() - 1) / 2];
  }
  return {stat, finals[pick].accuracy, finals[pick].loss, pick};
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  const auto csv = maybe_load(config);
  return run_with(config, csv.get());
}

std::vector<ExperimentReport> run_compare(const ExperimentConfig& config) {
  const auto csv = maybe_load(config);
  std::vector<ExperimentReport> out;
  for (Mode mode : {Mode::kCentralized, Mode::kFlOnly, Mode::kFfm}) {
    ExperimentConfig c = config;
    c.federation.mode = mode;
    out.push_back(run_with(c, csv.get()));
  }
  return out;
}

std::vector<ExperimentReport> run_sweep(const ExperimentConfig& config,
                                        std::span<const std::size_t> k_values) {
  if (k_values.empty()) throw ConfigError("kshots: at least one k is required");
  const auto csv = maybe_load(config);
  std::vector<ExperimentReport> out;
  for (std::size_t k : k_values) {
    if (k < 1) throw ConfigError("kshots: every k must be >= 1");
    ExperimentConfig c = config;
    c.k_shot = k;
    auto report = run_with(c, csv.get());
    report.label = "k=" + std::to_string(k);
    out.push_back(std::move(report));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

Json metrics_json(const Metrics& m) {
  Json j;
  j["accuracy"] = m.accuracy;
  j["loss"] = m.loss;
  return j;
}

Json comm_json(const CommTotals& c) {
  Json j;
  j["messages"] = c.messages;
  j["bytes"] = c.bytes;
  return j;
}

Json trial_json(const TrialResult& t) {
  Json j;
  j["trial"] = t.index;
  j["seed"] = t.seed;
  j["plan_seed"] = t.plan_seed;
  j["plan_fingerprint"] = hex64(t.plan_fingerprint);
  j["diverged"] = t.history.diverged;
  j["divergence"] = t.history.divergence;
  j["initial"] = metrics_json(t.history.initial);
  j["final"] = metrics_json(t.history.final_metrics());
  j["public_reads"] = t.history.public_reads;
  j["private_reads"] = t.history.private_reads;
  j["comm"] = comm_json(t.history.comm);
  Json rounds = Json::array();
  for (const auto& r : t.history.rounds) {
    Json rj;
    rj["round"] = r.round;
    rj["fingerprint"] = hex64(r.fingerprint);
    rj["train_loss"] = r.train_loss;
    rj["test_accuracy"] = r.test_accuracy;
    rj["test_loss"] = r.test_loss;
    rj["participants"] = r.participants;
    rj["aggregations"] = r.aggregations;
    rj["messages"] = r.messages;
    rj["bytes"] = r.bytes;
    rounds.push_back(std::move(rj));
  }
  j["rounds"] = std::move(rounds);
  return j;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report to '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace

Json to_json(const ReportBundle& bundle) {
  Json doc;
  doc["command"] = bundle.command;
  doc["config"] = bundle.config;
  Json entries = Json::array();
  for (const auto& e : bundle.entries) {
    Json j;
    j["label"] = e.label;
    j["mode"] = mode_name(e.mode);
    j["k_shot"] = e.k_shot ? Json(*e.k_shot) : Json(nullptr);
    Json summary;
    summary["stat"] = stat_name(e.summary.stat);
    summary["accuracy"] = e.summary.accuracy;
    summary["loss"] = e.summary.loss;
    summary["trial"] = e.summary.trial;
    j["summary"] = std::move(summary);
    j["comm"] = comm_json(e.comm);
    Json trials = Json::array();
    for (const auto& t : e.trials) trials.push_back(trial_json(t));
    j["trials"] = std::move(trials);
    entries.push_back(std::move(j));
  }
  doc["entries"] = std::move(entries);
  return doc;
}

std::string to_csv(const ReportBundle& bundle) {
  std::ostringstream os;
  os << "entry,mode,k_shot,trial,round,train_loss,test_accuracy,test_loss,aggregations,messages,"
        "bytes,fingerprint\n";
  for (const auto& e : bundle.entries) {
    for (const auto& t : e.trials) {
      for (const auto& r : t.history.rounds) {
        os << e.label << ',' << mode_name(e.mode) << ','
           << (e.k_shot ? std::to_string(*e.k_shot) : std::string()) << ',' << t.index << ','
           << r.round << ',' << format_double(r.train_loss) << ','
           << format_double(r.test_accuracy) << ',' << format_double(r.test_loss) << ','
           << r.aggregations << ',' << r.messages << ',' << r.bytes << ','
           << hex64(r.fingerprint) << '\n';
      }
    }
  }
  return os.str();
}

void emit(const ReportBundle& bundle, const std::string& format, const std::string& path) {
  if (format == "json") {
    write_text(to_json(bundle).dump(2) + "\n", path);
  } else if (format == "csv") {
    write_text(to_csv(bundle), path);
  } else {
    throw ConfigError("format: expected json or csv, got '" + format + "'");
  }
}

}  // namespace fedsim
