#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <string_view>

#include "fedsim/error.hpp"
#include "fedsim/harness.hpp"

namespace fedsim {

namespace {

// Typed access to one JSON object with field-path diagnostics. finish()
// rejects keys that were never read.
class Fields {
 public:
  Fields(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + "expected an object");
  }

  bool has(std::string_view key) const { return obj_.contains(key); }

  std::size_t size(std::string_view key, std::size_t fallback, std::size_t min = 0) {
    const Json* v = take(key);
    if (v == nullptr) return fallback;
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
      throw ConfigError(field(key) + ": expected a non-negative integer");
    }
    const auto out = v->get<std::uint64_t>();
    if (out < min) throw ConfigError(field(key) + ": must be >= " + std::to_string(min));
    return static_cast<std::size_t>(out);
  }

  std::optional<std::size_t> optional_size(std::string_view key, std::size_t min = 0) {
    if (!has(key) || obj_.at(std::string(key)).is_null()) {
      take(key);
      return std::nullopt;
    }
    return size(key, 0, min);
  }

  std::uint64_t u64(std::string_view key, std::uint64_t fallback) {
    const Json* v = take(key);
    if (v == nullptr) return fallback;
    if (!v->is_number_unsigned()) throw ConfigError(field(key) + ": expected a non-negative integer");
    return v->get<std::uint64_t>();
  }

  double number(std::string_view key, double fallback) {
    const Json* v = take(key);
    if (v == nullptr) return fallback;
    if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
    const double out = v->get<double>();
    if (!std::isfinite(out)) throw ConfigError(field(key) + ": must be finite");
    return out;
  }

  bool boolean(std::string_view key, bool fallback) {
    const Json* v = take(key);
    if (v == nullptr) return fallback;
    if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
    return v->get<bool>();
  }

  std::string string(std::string_view key, std::string fallback) {
    const Json* v = take(key);
    if (v == nullptr) return fallback;
    if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
    return v->get<std::string>();
  }

  std::vector<double> numbers(std::string_view key) {
    const Json* v = take(key);
    if (v == nullptr) return {};
    std::vector<double> out;
    if (v->is_number()) {
      out.push_back(v->get<double>());
    } else if (v->is_array()) {
      for (const auto& x : *v) {
        if (!x.is_number()) throw ConfigError(field(key) + ": expected numbers");
        out.push_back(x.get<double>());
      }
    } else {
      throw ConfigError(field(key) + ": expected a number or an array of numbers");
    }
    return out;
  }

  Fields object(std::string_view key) {
    const Json* v = take(key);
    if (v == nullptr) throw ConfigError(field(key) + ": required");
    return Fields(*v, field(key));
  }

  std::optional<Fields> optional_object(std::string_view key) {
    const Json* v = take(key);
    if (v == nullptr) return std::nullopt;
    return Fields(*v, field(key));
  }

  void require(std::string_view key) const {
    if (!has(key)) throw ConfigError(field(key) + ": required");
  }

  [[noreturn]] void fail(std::string_view key, const std::string& why) const {
    throw ConfigError(field(key) + ": " + why);
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!used_.count(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

 private:
  const Json* take(std::string_view key) {
    used_.insert(std::string(key));
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string field(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  const Json& obj_;
  std::string path_;
  std::set<std::string, std::less<>> used_;
};

ModelKind parse_model_kind(Fields& f, bool child) {
  const std::string kind = f.string("kind", "logistic");
  if (kind == "logistic") return ModelKind::kLogistic;
  if (kind == "mlp") return ModelKind::kMlp;
  if (!child && kind == "adapter") return ModelKind::kAdapter;
  if (!child && kind == "soft_prompt") return ModelKind::kSoftPrompt;
  f.fail("kind", child ? "expected logistic or mlp" : "expected logistic, mlp, adapter or soft_prompt");
}

ModelConfig parse_model(Fields f) {
  ModelConfig m;
  m.kind = parse_model_kind(f, false);
  if (m.kind == ModelKind::kMlp) m.hidden = f.size("hidden", m.hidden, 1);
  if (m.kind == ModelKind::kAdapter || m.kind == ModelKind::kSoftPrompt) {
    const char* key = m.kind == ModelKind::kAdapter ? "backbone" : "inner";
    if (m.kind == ModelKind::kSoftPrompt) m.prompt_len = f.size("prompt_len", m.prompt_len, 1);
    if (auto child = f.optional_object(key)) {
      m.child_kind = parse_model_kind(*child, true);
      if (m.child_kind == ModelKind::kMlp) m.child_hidden = child->size("hidden", m.child_hidden, 1);
      child->finish();
    }
  }
  f.finish();
  return m;
}

DatasetConfig parse_dataset(Fields f) {
  DatasetConfig d;
  const std::string kind = f.string("kind", "blobs");
  if (kind == "blobs") {
    d.kind = DatasetConfig::Kind::kBlobs;
    d.classes = f.size("classes", d.classes, 2);
    d.per_class = f.size("per_class", d.per_class, 1);
    d.dim = f.size("d", d.dim, 1);
    d.separation = f.number("separation", d.separation);
    d.noise_sd = f.number("noise_sd", d.noise_sd);
    if (d.noise_sd < 0.0) f.fail("noise_sd", "must be >= 0");
    d.test_per_class = f.size("test_per_class", d.test_per_class, 1);
  } else if (kind == "csv") {
    d.kind = DatasetConfig::Kind::kCsv;
    f.require("path");
    d.path = f.string("path", "");
    d.label_column = f.string("label_column", d.label_column);
    d.test_path = f.string("test_path", "");
    d.test_fraction = f.number("test_fraction", d.test_fraction);
    if (d.test_path.empty() && !(d.test_fraction > 0.0 && d.test_fraction < 1.0)) {
      f.fail("test_fraction", "must be in (0, 1) when no test_path is given");
    }
  } else {
    f.fail("kind", "expected blobs or csv");
  }
  f.finish();
  return d;
}

PartitionScheme parse_partition(Fields f) {
  const std::string scheme = f.string("scheme", "dirichlet");
  PartitionScheme out;
  if (scheme == "iid") {
    out = PartitionScheme::iid();
  } else if (scheme == "label_shard") {
    out = PartitionScheme::label_shards(f.size("shards_per_client", 2, 1));
  } else if (scheme == "dirichlet") {
    const double alpha = f.number("alpha", 0.5);
    if (!(alpha > 0.0)) f.fail("alpha", "must be > 0");
    out = PartitionScheme::dirichlet(alpha);
  } else {
    f.fail("scheme", "expected iid, label_shard or dirichlet");
  }
  f.finish();
  return out;
}

FedConfig parse_federation(Fields f) {
  FedConfig c;
  const std::string mode = f.string("mode", "ffm");
  if (mode == "centralized") c.mode = Mode::kCentralized;
  else if (mode == "fl_only") c.mode = Mode::kFlOnly;
  else if (mode == "ffm") c.mode = Mode::kFfm;
  else f.fail("mode", "expected centralized, fl_only or ffm");
  c.rounds = f.size("rounds", c.rounds);
  c.local_epochs = f.size("local_epochs", c.local_epochs, 1);
  c.local_lr = f.number("local_lr", c.local_lr);
  c.batch_size = f.size("batch_size", c.batch_size, 1);
  if (f.has("server_lr")) c.server_lr = f.numbers("server_lr");
  const std::string weighting = f.string("weighting", "normalized");
  if (weighting == "normalized") c.weighting = Weighting::kNormalized;
  else if (weighting == "raw_count") c.weighting = Weighting::kRawCount;
  else f.fail("weighting", "expected normalized or raw_count");
  c.deploy_fraction = f.number("deploy_fraction", c.deploy_fraction);
  c.participation_fraction = f.number("participation_fraction", c.participation_fraction);
  c.tau = f.size("tau", c.tau);
  c.server_epochs = f.size("server_epochs", c.server_epochs);
  c.central_lr = f.number("central_lr", c.local_lr);
  c.server_first_round_only = f.boolean("server_first_round_only", false);
  c.central_epoch_budget = f.optional_size("central_epochs");
  c.async = f.boolean("async", false);
  c.threads = f.size("threads", 0);
  if (auto lat = f.optional_object("latency")) {
    c.latency.base = lat->number("base", c.latency.base);
    c.latency.jitter = lat->number("jitter", c.latency.jitter);
    c.latency.client_base = lat->numbers("client_base");
    c.latency.client_jitter = lat->numbers("client_jitter");
    lat->finish();
  }
  f.finish();
  return c;
}

}  // namespace

ModelSpec ModelConfig::build(std::size_t input_dim, std::size_t classes) const {
  switch (kind) {
    case ModelKind::kLogistic: return ModelSpec::logistic(input_dim, classes);
    case ModelKind::kMlp: return ModelSpec::mlp(input_dim, hidden, classes);
    case ModelKind::kAdapter: {
      const auto backbone = child_kind == ModelKind::kMlp
                                ? ModelSpec::mlp(input_dim, child_hidden, classes)
                                : ModelSpec::logistic(input_dim, classes);
      return ModelSpec::adapter(backbone, classes);
    }
    case ModelKind::kSoftPrompt: {
      const std::size_t width = input_dim + prompt_len;
      const auto inner = child_kind == ModelKind::kMlp
                             ? ModelSpec::mlp(width, child_hidden, classes)
                             : ModelSpec::logistic(width, classes);
      return ModelSpec::soft_prompt(inner, prompt_len);
    }
  }
  throw ConfigError("model.kind: unknown");
}

ExperimentConfig parse_config(const Json& doc) {
  ExperimentConfig c;
  c.source = doc;
  Fields f(doc, "");
  c.dataset = parse_dataset(f.object("dataset"));
  c.model = f.has("model") ? parse_model(f.object("model")) : ModelConfig{};
  c.clients = f.size("clients", c.clients, 1);
  if (f.has("partition")) c.partition = parse_partition(f.object("partition"));
  c.k_shot = f.optional_size("k_shot", 1);
  c.arrival_k = f.size("arrival_k", 0);
  if (c.arrival_k > 0 && !c.k_shot) f.fail("arrival_k", "requires k_shot");
  c.federation = f.has("federation") ? parse_federation(f.object("federation")) : FedConfig{};
  c.trials = f.size("trials", c.trials, 1);
  c.base_seed = f.u64("base_seed", 0);
  const std::string stat = f.string("summary_stat", "median");
  if (stat == "median") c.summary_stat = SummaryStat::kMedian;
  else if (stat == "best") c.summary_stat = SummaryStat::kBest;
  else f.fail("summary_stat", "expected best or median");
  c.output = f.string("output", "");
  c.format = f.string("format", "json");
  if (c.format != "json" && c.format != "csv") f.fail("format", "expected json or csv");
  f.finish();

  c.federation.validate(c.clients);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

}  // namespace fedsim
