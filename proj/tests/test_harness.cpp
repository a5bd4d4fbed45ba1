#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fedsim/error.hpp"
#include "fedsim/harness.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  const fs::path dir = fs::path(FEDSIM_TEST_TMP) / "harness";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Json small_doc() {
  return Json::parse(R"({
    "dataset": {"kind": "blobs", "classes": 3, "per_class": 40, "d": 4, "separation": 2.0,
                "noise_sd": 1.0, "test_per_class": 10},
    "model": {"kind": "logistic"},
    "clients": 3,
    "partition": {"scheme": "dirichlet", "alpha": 0.5},
    "federation": {"mode": "ffm", "rounds": 2, "local_epochs": 1, "local_lr": 0.1,
                   "batch_size": 4, "server_epochs": 1},
    "trials": 3,
    "base_seed": 5,
    "summary_stat": "median"
  })");
}

fs::path write_config(const std::string& name, const Json& doc) {
  const fs::path p = tmp_dir() / name;
  std::ofstream(p, std::ios::binary | std::ios::trunc) << doc.dump(2);
  return p;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fedsim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli(static_cast<int>(argv.size()), argv.data());
}

std::string config_error(const Json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("summarize examples") {
  const std::vector<Metrics> one{{0.5, 0.7}};
  CHECK(summarize(one, SummaryStat::kBest).accuracy == 0.5);
  CHECK(summarize(one, SummaryStat::kMedian).accuracy == 0.5);

  const std::vector<Metrics> three{{0.2, 1.0}, {0.9, 0.1}, {0.6, 0.4}};
  const auto best = summarize(three, SummaryStat::kBest);
  CHECK(best.accuracy == 0.9);
  CHECK(best.loss == 0.1);
  CHECK(best.trial == 1);
  const auto median = summarize(three, SummaryStat::kMedian);
  CHECK(median.accuracy == 0.6);
  CHECK(median.loss == 0.4);
  CHECK(median.trial == 2);

  const std::vector<Metrics> two{{0.4, 0.0}, {0.2, 0.0}};
  CHECK(summarize(two, SummaryStat::kMedian).accuracy == 0.2);
  CHECK_THROWS_AS(summarize(std::vector<Metrics>{}, SummaryStat::kBest), std::invalid_argument);
}

TEST_CASE("parse_config reads every section") {
  auto doc = small_doc();
  doc["federation"]["server_lr"] = Json::array({1.0, 0.5});
  doc["federation"]["latency"] = Json::parse(R"({"base": 0.5, "jitter": 0.1})");
  doc["federation"]["weighting"] = "raw_count";
  doc["model"] = Json::parse(R"({"kind": "adapter", "backbone": {"kind": "mlp", "hidden": 5}})");
  doc["k_shot"] = 4;
  const auto c = parse_config(doc);
  CHECK(c.clients == 3);
  CHECK(c.trials == 3);
  CHECK(c.base_seed == 5);
  CHECK(*c.k_shot == 4);
  CHECK(c.federation.rounds == 2);
  CHECK(c.federation.server_lr == std::vector<double>{1.0, 0.5});
  CHECK(c.federation.latency.base == 0.5);
  CHECK(c.federation.weighting == Weighting::kRawCount);
  CHECK(c.federation.central_lr == 0.1);
  CHECK(c.partition.kind == PartitionScheme::Kind::kDirichlet);
  const auto spec = c.model.build(4, 3);
  CHECK(spec.kind() == ModelKind::kAdapter);
  CHECK(spec.child().hidden() == 5);
  CHECK(c.source == doc);
}

TEST_CASE("parse_config rejects bad documents with a field path") {
  auto doc = small_doc();
  doc["bogus"] = 1;
  CHECK(config_error(doc).find("bogus: unknown key") != std::string::npos);

  doc = small_doc();
  doc["federation"]["lr"] = 0.1;
  CHECK(config_error(doc).find("federation.lr: unknown key") != std::string::npos);

  doc = small_doc();
  doc["trials"] = 0;
  CHECK(config_error(doc).find("trials") != std::string::npos);

  doc = small_doc();
  doc["clients"] = "three";
  CHECK(config_error(doc).find("clients") != std::string::npos);

  doc = small_doc();
  doc["summary_stat"] = "mean";
  CHECK(config_error(doc).find("summary_stat") != std::string::npos);

  doc = small_doc();
  doc["federation"]["tau"] = 4;
  CHECK(config_error(doc).find("federation.tau") != std::string::npos);

  doc = small_doc();
  doc["model"]["kind"] = "transformer";
  CHECK(config_error(doc).find("model.kind") != std::string::npos);

  doc = small_doc();
  doc.erase("dataset");
  CHECK(config_error(doc).find("dataset: required") != std::string::npos);

  doc = small_doc();
  doc["arrival_k"] = 2;
  CHECK(config_error(doc).find("arrival_k") != std::string::npos);

  CHECK_THROWS_AS(load_config(tmp_dir() / "missing.json"), ConfigError);
  const fs::path broken = tmp_dir() / "broken.json";
  std::ofstream(broken) << "{ not json";
  CHECK_THROWS_AS(load_config(broken), ConfigError);
}

TEST_CASE("prepare_trial applies k-shot sampling and arrivals") {
  auto doc = small_doc();
  doc["k_shot"] = 2;
  doc["arrival_k"] = 1;
  doc["partition"] = Json::parse(R"({"scheme": "iid"})");
  const auto c = parse_config(doc);
  const auto t = prepare_trial(c, 11);
  for (auto n : label_histogram(t.plan.public_shard)) CHECK(n <= 2);
  CHECK(t.plan.public_shard.size() == 6);
  for (const auto& s : t.plan.private_shards) CHECK(s.size() <= 6);
  REQUIRE(t.arrivals.increments.size() == 2);
  for (std::size_t c2 = 0; c2 < 3; ++c2) {
    const auto& inc = t.arrivals.increments[0][c2].indices;
    const auto& have = t.plan.private_shards[c2].indices;
    for (auto r : inc) CHECK(std::find(have.begin(), have.end(), r) == have.end());
  }
  CHECK(prepare_trial(c, 11).plan.fingerprint() == t.plan.fingerprint());
}

TEST_CASE("run_experiment summary and determinism") {
  auto doc = small_doc();
  SUBCASE("one trial: summary equals the trial's final metrics") {
    doc["trials"] = 1;
    for (const char* stat : {"best", "median"}) {
      doc["summary_stat"] = stat;
      const auto r = run_experiment(parse_config(doc));
      REQUIRE(r.trials.size() == 1);
      const auto fin = r.trials[0].history.final_metrics();
      CHECK(r.summary.accuracy == fin.accuracy);
      CHECK(r.summary.loss == fin.loss);
    }
  }
  SUBCASE("median over five trials matches sort-and-middle") {
    doc["trials"] = 5;
    const auto r = run_experiment(parse_config(doc));
    REQUIRE(r.trials.size() == 5);
    std::vector<double> acc;
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(r.trials[i].index == i);
      CHECK(r.trials[i].seed == 5 + i);
      acc.push_back(r.trials[i].history.final_metrics().accuracy);
    }
    std::sort(acc.begin(), acc.end());
    CHECK(r.summary.accuracy == acc[2]);
  }
  SUBCASE("same config gives identical report bytes") {
    const auto c = parse_config(doc);
    const ReportBundle a{"run", c.source, {run_experiment(c)}};
    const ReportBundle b{"run", c.source, {run_experiment(c)}};
    CHECK(to_json(a).dump(2) == to_json(b).dump(2));
    CHECK(to_csv(a) == to_csv(b));
  }
}

TEST_CASE("report formats") {
  const auto c = parse_config(small_doc());
  const ReportBundle bundle{"run", c.source, {run_experiment(c)}};

  SUBCASE("csv has one row per trial round") {
    const auto csv = to_csv(bundle);
    const auto lines = std::count(csv.begin(), csv.end(), '\n');
    std::size_t rounds = 0;
    for (const auto& t : bundle.entries[0].trials) rounds += t.history.rounds.size();
    CHECK(static_cast<std::size_t>(lines) == rounds + 1);
    CHECK(csv.rfind("entry,mode,k_shot,trial,round,", 0) == 0);
  }
  SUBCASE("csv for an empty history is the header alone") {
    auto doc = small_doc();
    doc["federation"]["rounds"] = 0;
    const auto c0 = parse_config(doc);
    const ReportBundle empty{"run", c0.source, {run_experiment(c0)}};
    const auto csv = to_csv(empty);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1);
  }
  SUBCASE("json re-emits byte-identically after parsing") {
    const fs::path p = tmp_dir() / "report.json";
    emit(bundle, "json", p.string());
    const auto text = slurp(p);
    CHECK(Json::parse(text).dump(2) + "\n" == text);
    const auto doc = Json::parse(text);
    CHECK(doc["command"] == "run");
    CHECK(doc["config"] == c.source);
    CHECK(doc["entries"][0]["trials"].size() == 3);
    std::vector<std::string> keys;
    for (const auto& [k, v] : doc["entries"][0].items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"label", "mode", "k_shot", "summary", "comm", "trials"});
  }
  SUBCASE("unwritable path is reported") {
    CHECK_THROWS(emit(bundle, "json", (tmp_dir() / "no/such/dir/r.json").string()));
  }
}

TEST_CASE("compare runs three regimes on identical partitions") {
  const auto entries = run_compare(parse_config(small_doc()));
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].mode == Mode::kCentralized);
  CHECK(entries[1].mode == Mode::kFlOnly);
  CHECK(entries[2].mode == Mode::kFfm);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(entries[0].trials[i].plan_seed == entries[1].trials[i].plan_seed);
    CHECK(entries[0].trials[i].plan_fingerprint == entries[2].trials[i].plan_fingerprint);
    CHECK(entries[1].trials[i].plan_fingerprint == entries[2].trials[i].plan_fingerprint);
  }
  CHECK(entries[0].trials[0].history.private_reads == 0);
  CHECK(entries[1].trials[0].history.public_reads == 0);
}

TEST_CASE("sweep entries are independent of each other") {
  const auto c = parse_config(small_doc());
  const std::vector<std::size_t> both{2, 4}, only{4};
  const auto a = run_sweep(c, both);
  const auto b = run_sweep(c, only);
  REQUIRE(a.size() == 2);
  CHECK(*a[0].k_shot == 2);
  CHECK(*a[1].k_shot == 4);
  CHECK(a[1].label == "k=4");
  CHECK(to_json(ReportBundle{"sweep", c.source, {a[1]}}).dump() ==
        to_json(ReportBundle{"sweep", c.source, {b[0]}}).dump());
}

TEST_CASE("csv datasets with a held-out fraction") {
  const auto data = gen_blobs(3, 20, 4, 3.0, 1.0, 2);
  const fs::path csv = tmp_dir() / "blobs.csv";
  write_csv(data, csv);
  auto doc = small_doc();
  doc["dataset"] = Json{{"kind", "csv"}, {"path", csv.string()}, {"test_fraction", 0.25}};
  doc["trials"] = 1;
  const auto c = parse_config(doc);
  const auto t = prepare_trial(c, 1);
  CHECK(t.test.size() == 15);
  CHECK(t.train->rows() == 45);
  CHECK(run_experiment(c).trials.size() == 1);
}

TEST_CASE("cli exit codes and outputs") {
  const auto cfg = write_config("cli.json", small_doc());
  const fs::path out = tmp_dir() / "cli_out.json";
  fs::remove(out);

  SUBCASE("run writes a report") {
    const fs::path trace = tmp_dir() / "trace.jsonl";
    CHECK(run_cli({"run", "--config", cfg.string(), "--out", out.string(), "--trace",
                   trace.string()}) == 0);
    CHECK(fs::exists(out));
    CHECK(Json::parse(slurp(out))["command"] == "run");
    const auto lines = slurp(trace);
    CHECK(std::count(lines.begin(), lines.end(), '\n') > 0);
  }
  SUBCASE("sweep echoes each k") {
    CHECK(run_cli({"sweep", "--config", cfg.string(), "--out", out.string(), "--kshots", "4,8"}) == 0);
    const auto doc = Json::parse(slurp(out));
    REQUIRE(doc["entries"].size() == 2);
    CHECK(doc["entries"][0]["k_shot"] == 4);
    CHECK(doc["entries"][1]["k_shot"] == 8);
  }
  SUBCASE("compare emits three summaries") {
    const fs::path csv = tmp_dir() / "cli_out.csv";
    CHECK(run_cli({"compare", "--config", cfg.string(), "--out", csv.string(), "--format", "csv"}) == 0);
    CHECK(slurp(csv).find("fl_only") != std::string::npos);
  }
  SUBCASE("usage and config errors exit 2, runtime errors exit 1") {
    CHECK(run_cli({"frobnicate"}) == 2);
    CHECK(run_cli({"run", "--config", cfg.string(), "--verbose"}) == 2);
    CHECK(run_cli({"run"}) == 2);
    CHECK(run_cli({"sweep", "--config", cfg.string()}) == 2);
    CHECK(run_cli({"run", "--config", (tmp_dir() / "absent.json").string()}) == 2);
    auto bad = small_doc();
    bad["extra"] = true;
    CHECK(run_cli({"run", "--config", write_config("bad.json", bad).string()}) == 2);
    auto missing_csv = small_doc();
    missing_csv["dataset"] = Json{{"kind", "csv"}, {"path", (tmp_dir() / "nope.csv").string()}};
    CHECK(run_cli({"run", "--config", write_config("nocsv.json", missing_csv).string()}) == 2);
    CHECK(run_cli({"run", "--config", cfg.string(), "--out",
                   (tmp_dir() / "no/such/dir/r.json").string()}) == 1);
    CHECK(run_cli({"--help"}) == 0);
  }
}

}  // TEST_SUITE
