#include "fedsim/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <thread>

#include "fedsim/error.hpp"
#include "fedsim/seed.hpp"

namespace fedsim {

std::string_view mode_name(Mode mode) {
  switch (mode) {
    case Mode::kCentralized: return "centralized";
    case Mode::kFlOnly: return "fl_only";
    case Mode::kFfm: return "ffm";
  }
  return "unknown";
}

namespace seeds {
std::uint64_t init(std::uint64_t run_seed) { return derive_seed(run_seed, SeedRole::kInit); }
std::uint64_t local(std::uint64_t run_seed, std::size_t round, std::size_t client) {
  return derive_seed(run_seed, SeedRole::kLocal, round, client);
}
std::uint64_t central(std::uint64_t run_seed, std::size_t round) {
  return derive_seed(run_seed, SeedRole::kCentral, round);
}
std::uint64_t epoch(std::uint64_t phase_seed, std::size_t epoch) {
  return derive_seed(phase_seed, {epoch});
}
}  // namespace seeds

// ---------------------------------------------------------------------------
// Queue

UpdateQueue::UpdateQueue(std::size_t tau) : tau_(tau) {
  if (tau_ < 1) throw std::invalid_argument("queue threshold tau must be >= 1");
}

std::optional<std::vector<ClientUpdate>> UpdateQueue::enqueue(ClientUpdate update) {
  items_.push_back(std::move(update));
  if (items_.size() < tau_) return std::nullopt;
  std::vector<ClientUpdate> batch;
  batch.swap(items_);
  return batch;
}

// ---------------------------------------------------------------------------
// Config

LatencyModel LatencyConfig::model(std::size_t clients, std::uint64_t seed) const {
  auto m = LatencyModel::uniform(clients + 1, base, jitter, seed);
  for (std::size_t k = 0; k < client_base.size() && k < clients; ++k) {
    m.base[client_node(k)] = client_base[k];
  }
  for (std::size_t k = 0; k < client_jitter.size() && k < clients; ++k) {
    m.jitter[client_node(k)] = client_jitter[k];
  }
  return m;
}

double FedConfig::eta(std::size_t round) const {
  if (server_lr.size() == 1) return server_lr.front();
  return server_lr.at(round - 1);
}

namespace {

std::size_t fraction_count(double fraction, std::size_t n) {
  // Guard against products like 0.3 * 10 = 3.0000000000000004.
  const double exact = fraction * static_cast<double>(n);
  const auto count = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  return std::clamp<std::size_t>(count, 1, n);
}

}  // namespace

std::size_t FedConfig::deploy_count(std::size_t clients) const {
  return fraction_count(deploy_fraction, clients);
}

std::size_t FedConfig::report_count(std::size_t clients) const {
  return fraction_count(participation_fraction, deploy_count(clients));
}

std::size_t FedConfig::effective_tau(std::size_t clients) const {
  return tau == 0 ? report_count(clients) : tau;
}

void FedConfig::validate(std::size_t clients) const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("federation." + field + ": " + why);
  };
  if (clients < 1) fail("clients", "at least one client is required");
  if (local_epochs < 1) fail("local_epochs", "must be >= 1");
  if (!(local_lr > 0.0)) fail("local_lr", "must be > 0");
  if (!(central_lr > 0.0)) fail("central_lr", "must be > 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (server_lr.empty()) fail("server_lr", "must not be empty");
  for (double e : server_lr) {
    if (!(e > 0.0) || !std::isfinite(e)) fail("server_lr", "every step size must be > 0");
  }
  if (server_lr.size() > 1 && server_lr.size() < rounds) {
    fail("server_lr", "per-round schedule has " + std::to_string(server_lr.size()) +
                          " entries for " + std::to_string(rounds) + " rounds");
  }
  if (!(deploy_fraction > 0.0 && deploy_fraction <= 1.0)) fail("deploy_fraction", "must be in (0, 1]");
  if (!(participation_fraction > 0.0 && participation_fraction <= 1.0)) {
    fail("participation_fraction", "must be in (0, 1]");
  }
  if (tau > report_count(clients)) {
    fail("tau", std::to_string(tau) + " exceeds the " + std::to_string(report_count(clients)) +
                    " clients reporting per round");
  }
  if (mode == Mode::kCentralized && server_epochs == 0 && central_epoch_budget.value_or(0) > 0) {
    fail("server_epochs", "must be >= 1 to pace a centralized epoch budget");
  }
  if (!(latency.base >= 0.0) || !(latency.jitter >= 0.0)) fail("latency", "base and jitter must be >= 0");
  if (!latency.client_base.empty() && latency.client_base.size() != clients) {
    fail("latency.client_base", "needs one entry per client");
  }
  if (!latency.client_jitter.empty() && latency.client_jitter.size() != clients) {
    fail("latency.client_jitter", "needs one entry per client");
  }
  for (double v : latency.client_base) {
    if (!(v >= 0.0)) fail("latency.client_base", "entries must be >= 0");
  }
  for (double v : latency.client_jitter) {
    if (!(v >= 0.0)) fail("latency.client_jitter", "entries must be >= 0");
  }
}

Metrics RoundHistory::final_metrics() const {
  if (rounds.empty()) return initial;
  return {rounds.back().test_accuracy, rounds.back().test_loss};
}

// ---------------------------------------------------------------------------
// Building blocks

ClientUpdate local_train(const ParameterVector& global, const ModelSpec& spec, const Shard& shard,
                         std::size_t epochs, double lr, std::size_t batch_size,
                         std::uint64_t seed, std::size_t client_id, std::size_t round) {
  if (shard.empty() || !shard.data) {
    throw std::invalid_argument("client " + std::to_string(client_id) + " has an empty shard");
  }
  if (epochs < 1) throw std::invalid_argument("local training needs epochs >= 1");
  if (lr < 0.0) throw std::invalid_argument("local learning rate must be >= 0");
  ParameterVector w = global;
  if (lr > 0.0) {
    for (std::size_t e = 0; e < epochs; ++e) {
      w = sgd_epoch(spec, std::move(w), *shard.data, shard.indices, lr, batch_size,
                    seeds::epoch(seed, e));
    }
  }
  ClientUpdate u;
  u.client_id = client_id;
  u.round = round;
  u.n_k = shard.size();
  u.delta = ParameterVector(w.layout());
  for (std::size_t i = 0; i < w.size(); ++i) u.delta[i] = w[i] - global[i];
  u.local = std::move(w);
  return u;
}

std::vector<std::size_t> select_clients(std::span<const std::size_t> client_ids, double fraction,
                                        std::size_t round, std::uint64_t seed) {
  if (client_ids.empty()) throw std::invalid_argument("no clients to select from");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("selection fraction must be in (0, 1]");
  }
  std::vector<std::size_t> ids(client_ids.begin(), client_ids.end());
  const std::size_t m = fraction_count(fraction, ids.size());
  Rng rng(derive_seed(seed, {round}));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates,
                                        Weighting weighting) {
  std::vector<double> w;
  w.reserve(updates.size());
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.n_k < 1) {
      throw std::invalid_argument("update from client " + std::to_string(u.client_id) +
                                  " has n_k = 0");
    }
    total += static_cast<double>(u.n_k);
  }
  for (const auto& u : updates) {
    const double n = static_cast<double>(u.n_k);
    w.push_back(weighting == Weighting::kNormalized ? n / total : n);
  }
  return w;
}

ParameterVector aggregate(const ParameterVector& w_prev, std::span<const ClientUpdate> updates,
                          double eta, Weighting weighting) {
  if (updates.empty()) throw std::invalid_argument("cannot aggregate an empty update list");
  for (const auto& u : updates) {
    if (!u.delta.same_layout(w_prev)) {
      throw DimensionError("update from client " + std::to_string(u.client_id) +
                           " does not match the global model layout");
    }
  }
  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) {
    return a->client_id != b->client_id ? a->client_id < b->client_id : a->round < b->round;
  });
  std::vector<double> weights;
  double total = 0.0;
  for (const auto* u : ordered) {
    if (u->n_k < 1) {
      throw std::invalid_argument("update from client " + std::to_string(u->client_id) +
                                  " has n_k = 0");
    }
    weights.push_back(static_cast<double>(u->n_k));
    total += weights.back();
  }
  if (weighting == Weighting::kNormalized) {
    for (auto& x : weights) x /= total;
  }

  // A lone update applied at unit step reproduces the client's model exactly;
  // w_prev + (w_k - w_prev) can differ from w_k in the last bit.
  if (ordered.size() == 1 && eta * weights.front() == 1.0 && ordered.front()->base &&
      ordered.front()->local.same_layout(w_prev) && *ordered.front()->base == w_prev) {
    return ordered.front()->local;
  }

  ParameterVector next = w_prev;
  for (std::size_t i = 0; i < next.size(); ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < ordered.size(); ++k) sum += weights[k] * ordered[k]->delta[i];
    next[i] = w_prev[i] + eta * sum;
  }
  return next;
}

ParameterVector central_optimize(const ParameterVector& w, const ModelSpec& spec,
                                 const Shard& public_shard, std::size_t epochs, double lr,
                                 std::size_t batch_size, std::uint64_t seed) {
  ParameterVector out = w;
  if (epochs == 0 || public_shard.empty() || !public_shard.data) return out;
  for (std::size_t e = 0; e < epochs; ++e) {
    out = sgd_epoch(spec, std::move(out), *public_shard.data, public_shard.indices, lr,
                    batch_size, seeds::epoch(seed, e));
  }
  return out;
}

Metrics evaluate(const ModelSpec& spec, const ParameterVector& params, const Shard& test) {
  if (test.empty() || !test.data) throw std::invalid_argument("cannot evaluate on an empty test shard");
  std::size_t hits = 0;
  for (std::size_t r : test.indices) {
    if (predict(spec, params, test.data->row(r)) == static_cast<std::size_t>(test.data->labels[r])) {
      ++hits;
    }
  }
  return {static_cast<double>(hits) / static_cast<double>(test.size()),
          mean_loss(spec, params, *test.data, test.indices)};
}

// ---------------------------------------------------------------------------
// Runners

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

double training_loss(const ModelSpec& spec, const ParameterVector& w,
                     const std::vector<const Shard*>& shards) {
  std::vector<std::size_t> rows;
  const Dataset* data = nullptr;
  for (const Shard* s : shards) {
    if (s->empty()) continue;
    data = s->data.get();
    rows.insert(rows.end(), s->indices.begin(), s->indices.end());
  }
  if (rows.empty() || data == nullptr) return 0.0;
  return mean_loss(spec, w, *data, rows);
}

void check_common(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
                  const Shard& test) {
  if (plan.private_shards.empty()) throw ConfigError("plan: no client shards");
  config.validate(plan.private_shards.size());
  if (test.empty() || !test.data) throw ConfigError("test: test shard is empty");
  if (test.data->dim != spec.input_dim()) {
    throw ConfigError("model: input dimension " + std::to_string(spec.input_dim()) +
                      " does not match test features of width " + std::to_string(test.data->dim));
  }
}

class FederatedRun {
 public:
  FederatedRun(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
               const Shard& test, const ArrivalSchedule* arrivals, bool use_public)
      : config_(config),
        plan_(plan),
        spec_(spec),
        test_(test),
        arrivals_(arrivals),
        use_public_(use_public),
        shards_(plan.private_shards),
        net_(config.latency.model(plan.private_shards.size(), derive_seed(config.seed, SeedRole::kNet))),
        queue_(config.effective_tau(plan.private_shards.size())),
        payload_bytes_(model_payload_bytes(spec.param_count())) {
    for (std::size_t k = 0; k < shards_.size(); ++k) {
      if (shards_[k].empty()) throw ConfigError("plan: client " + std::to_string(k) + " has no data");
    }
    client_ids_.resize(shards_.size());
    std::iota(client_ids_.begin(), client_ids_.end(), std::size_t{0});
  }

  RoundHistory run() {
    w_ = init_params(spec_, seeds::init(config_.seed));
    history_.initial = evaluate(spec_, w_, test_);
    for (std::size_t t = 1; t <= config_.rounds && !history_.diverged; ++t) round(t);
    history_.final_params = w_;
    history_.trace = net_.trace();
    history_.comm = comm_totals(history_.trace, spec_.param_count());
    return std::move(history_);
  }

 private:
  void diverge(const std::string& why) {
    history_.diverged = true;
    history_.divergence = why;
  }

  void round(std::size_t t) {
    if (arrivals_ != nullptr && t - 1 < arrivals_->increments.size()) {
      const auto& inc = arrivals_->increments[t - 1];
      for (std::size_t k = 0; k < inc.size() && k < shards_.size(); ++k) {
        auto& idx = shards_[k].indices;
        idx.insert(idx.end(), inc[k].indices.begin(), inc[k].indices.end());
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
      }
    }

    if (use_public_ && !plan_.public_shard.empty() &&
        (!config_.server_first_round_only || t == 1)) {
      try {
        w_ = central_optimize(w_, spec_, plan_.public_shard, config_.server_epochs,
                              config_.central_lr, config_.batch_size,
                              seeds::central(config_.seed, t));
      } catch (const NumericError& e) {
        diverge("round " + std::to_string(t) + " server: " + e.what());
        return;
      }
      ++history_.public_reads;
    }

    const auto deploy = select_clients(client_ids_, config_.deploy_fraction, t,
                                       derive_seed(config_.seed, SeedRole::kDeploy));
    const auto report = select_clients(deploy, config_.participation_fraction, t,
                                       derive_seed(config_.seed, SeedRole::kReport));

    auto base = std::make_shared<const ParameterVector>(w_);
    std::vector<std::optional<ClientUpdate>> trained(report.size());
    std::vector<std::exception_ptr> failures(report.size());
    parallel_for(report.size(), config_.threads, [&](std::size_t i) {
      const std::size_t k = report[i];
      try {
        trained[i] = local_train(*base, spec_, shards_[k], config_.local_epochs, config_.local_lr,
                                 config_.batch_size, seeds::local(config_.seed, t, k), k, t);
        trained[i]->base = base;
      } catch (...) {
        failures[i] = std::current_exception();
      }
    });
    history_.private_reads += report.size();
    for (std::size_t i = 0; i < report.size(); ++i) {
      if (!failures[i]) continue;
      try {
        std::rethrow_exception(failures[i]);
      } catch (const NumericError& e) {
        diverge("round " + std::to_string(t) + " client " + std::to_string(report[i]) + ": " +
                e.what());
        return;
      }
    }

    const std::size_t trace_before = net_.trace().size();
    std::size_t r = 0;
    for (std::size_t k : deploy) {
      const Event ev = net_.send(kServerNode, client_node(k), PayloadTag::kDeploy, payload_bytes_, now_);
      if (r < report.size() && report[r] == k) {
        pending_deploys_.emplace(ev.seq, std::move(*trained[r]));
        ++r;
      }
    }

    RoundRecord rec;
    rec.round = t;
    const double eta = config_.eta(t);
    auto apply = [&](std::vector<ClientUpdate>& batch) {
      for (const auto& u : batch) {
        if (!u.delta.all_finite()) {
          diverge("round " + std::to_string(t) + " client " + std::to_string(u.client_id) +
                  ": non-finite update rejected");
          return;
        }
      }
      w_ = aggregate(w_, batch, eta, config_.weighting);
      ++rec.aggregations;
      for (const auto& u : batch) rec.participants.push_back(u.client_id);
    };

    if (config_.async) {
      while (auto ev = net_.next_event()) {
        now_ = std::max(now_, ev->deliver_at);
        if (ev->tag == PayloadTag::kDeploy) {
          forward_update(*ev);
          continue;
        }
        auto it = in_flight_.find(ev->seq);
        auto flushed = queue_.enqueue(std::move(it->second));
        in_flight_.erase(it);
        if (flushed) {
          apply(*flushed);
          break;
        }
      }
    } else {
      std::vector<ClientUpdate> arrived;
      while (auto ev = net_.next_event()) {
        now_ = std::max(now_, ev->deliver_at);
        if (ev->tag == PayloadTag::kDeploy) {
          forward_update(*ev);
          continue;
        }
        auto it = in_flight_.find(ev->seq);
        arrived.push_back(std::move(it->second));
        in_flight_.erase(it);
      }
      std::stable_sort(arrived.begin(), arrived.end(),
                       [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
      for (auto& u : arrived) {
        if (history_.diverged) break;
        if (auto flushed = queue_.enqueue(std::move(u))) apply(*flushed);
      }
    }
    if (history_.diverged) return;
    if (!w_.all_finite()) {
      diverge("round " + std::to_string(t) + ": aggregation produced non-finite global parameters");
      return;
    }

    const auto& trace = net_.trace();
    const NetTrace round_events(trace.begin() + static_cast<std::ptrdiff_t>(trace_before), trace.end());
    const auto totals = comm_totals(round_events, spec_.param_count());
    rec.messages = totals.messages;
    rec.bytes = totals.bytes;
    rec.fingerprint = w_.fingerprint();

    std::vector<const Shard*> train;
    if (use_public_) train.push_back(&plan_.public_shard);
    for (const auto& s : shards_) train.push_back(&s);
    rec.train_loss = training_loss(spec_, w_, train);
    const auto m = evaluate(spec_, w_, test_);
    rec.test_accuracy = m.accuracy;
    rec.test_loss = m.loss;
    history_.rounds.push_back(std::move(rec));
    if (std::isnan(m.loss)) diverge("round " + std::to_string(t) + ": evaluation loss is NaN");
  }

  // A delivered deployment triggers the client's upload if it reports this round.
  void forward_update(const Event& deploy) {
    auto it = pending_deploys_.find(deploy.seq);
    if (it == pending_deploys_.end()) return;
    const Event up = net_.send(deploy.dst, kServerNode, PayloadTag::kUpdate, payload_bytes_,
                               deploy.deliver_at);
    in_flight_.emplace(up.seq, std::move(it->second));
    pending_deploys_.erase(it);
  }

  const FedConfig& config_;
  const PartitionPlan& plan_;
  const ModelSpec& spec_;
  const Shard& test_;
  const ArrivalSchedule* arrivals_;
  bool use_public_;
  std::vector<Shard> shards_;
  std::vector<std::size_t> client_ids_;
  Network net_;
  UpdateQueue queue_;
  std::uint64_t payload_bytes_;
  double now_ = 0.0;
  ParameterVector w_;
  RoundHistory history_;
  // Keyed by event seq.
  std::map<std::uint64_t, ClientUpdate> pending_deploys_;
  std::map<std::uint64_t, ClientUpdate> in_flight_;
};

}  // namespace

RoundHistory run_fedavg(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
                        const Shard& test, const ArrivalSchedule* arrivals) {
  if (config.mode != Mode::kFlOnly) throw ConfigError("federation.mode: run_fedavg needs fl_only");
  check_common(config, plan, spec, test);
  return FederatedRun(config, plan, spec, test, arrivals, false).run();
}

RoundHistory run_ffm(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
                     const Shard& test, const ArrivalSchedule* arrivals) {
  if (config.mode != Mode::kFfm) throw ConfigError("federation.mode: run_ffm needs ffm");
  check_common(config, plan, spec, test);
  return FederatedRun(config, plan, spec, test, arrivals, true).run();
}

RoundHistory run_centralized(const FedConfig& config, const PartitionPlan& plan,
                             const ModelSpec& spec, const Shard& test) {
  if (config.mode != Mode::kCentralized) {
    throw ConfigError("federation.mode: run_centralized needs centralized");
  }
  check_common(config, plan, spec, test);
  if (plan.public_shard.empty()) throw ConfigError("plan: centralized training needs a public shard");

  const std::size_t budget = config.central_epoch_budget.value_or(config.rounds * config.server_epochs);
  RoundHistory history;
  ParameterVector w = init_params(spec, seeds::init(config.seed));
  history.initial = evaluate(spec, w, test);
  const std::vector<const Shard*> train{&plan.public_shard};
  std::size_t done = 0;
  for (std::size_t t = 1; done < budget; ++t) {
    const std::size_t epochs = std::min(config.server_epochs, budget - done);
    try {
      w = central_optimize(w, spec, plan.public_shard, epochs, config.central_lr,
                           config.batch_size, seeds::central(config.seed, t));
    } catch (const NumericError& e) {
      history.diverged = true;
      history.divergence = "round " + std::to_string(t) + " server: " + e.what();
      break;
    }
    ++history.public_reads;
    done += epochs;
    RoundRecord rec;
    rec.round = t;
    rec.fingerprint = w.fingerprint();
    rec.train_loss = training_loss(spec, w, train);
    const auto m = evaluate(spec, w, test);
    rec.test_accuracy = m.accuracy;
    rec.test_loss = m.loss;
    history.rounds.push_back(std::move(rec));
    if (std::isnan(m.loss)) {
      history.diverged = true;
      history.divergence = "round " + std::to_string(t) + ": evaluation loss is NaN";
      break;
    }
  }
  history.final_params = std::move(w);
  return history;
}

RoundHistory run_regime(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
                        const Shard& test, const ArrivalSchedule* arrivals) {
  switch (config.mode) {
    case Mode::kCentralized: return run_centralized(config, plan, spec, test);
    case Mode::kFlOnly: return run_fedavg(config, plan, spec, test, arrivals);
    case Mode::kFfm: return run_ffm(config, plan, spec, test, arrivals);
  }
  throw ConfigError("federation.mode: unknown mode");
}

}  // namespace fedsim
