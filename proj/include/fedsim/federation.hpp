#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/model.hpp"
#include "fedsim/simnet.hpp"

namespace fedsim {

enum class Mode { kCentralized, kFlOnly, kFfm };

// kNormalized weights updates by n_k / sum(n_j); kRawCount uses n_k as is.
enum class Weighting { kNormalized, kRawCount };

std::string_view mode_name(Mode mode);

struct ClientUpdate {
  std::size_t client_id = 0;
  std::size_t round = 1;
  std::size_t n_k = 0;
  ParameterVector delta;  // local - base
  ParameterVector local;
  // Global model the client started from.
  std::shared_ptr<const ParameterVector> base;
};

// Server-side queue that releases exactly tau updates, in arrival order, each
// time it fills.
class UpdateQueue {
 public:
  explicit UpdateQueue(std::size_t tau);

  // nullopt while pending; otherwise the flushed batch, leaving the queue empty.
  std::optional<std::vector<ClientUpdate>> enqueue(ClientUpdate update);

  std::size_t tau() const { return tau_; }
  std::size_t size() const { return items_.size(); }

 private:
  std::size_t tau_;
  std::vector<ClientUpdate> items_;
};

struct LatencyConfig {
  double base = 1.0;
  double jitter = 0.0;
  // Per-client overrides; empty means every client uses base / jitter.
  std::vector<double> client_base;
  std::vector<double> client_jitter;

  LatencyModel model(std::size_t clients, std::uint64_t seed) const;
};

struct FedConfig {
  Mode mode = Mode::kFfm;
  std::size_t rounds = 10;
  std::size_t local_epochs = 5;
  double local_lr = 0.05;
  std::size_t batch_size = 8;
  // One entry: constant step. Otherwise entry t-1 is used in round t.
  std::vector<double> server_lr{1.0};
  Weighting weighting = Weighting::kNormalized;
  double deploy_fraction = 1.0;
  double participation_fraction = 1.0;
  // 0 selects the number of reporting clients per round.
  std::size_t tau = 0;
  std::size_t server_epochs = 5;
  double central_lr = 0.05;
  bool server_first_round_only = false;
  // Centralized regime only; defaults to rounds * server_epochs.
  std::optional<std::size_t> central_epoch_budget;
  bool async = false;
  LatencyConfig latency;
  std::uint64_t seed = 0;
  // Worker threads for local training; 0 picks the hardware concurrency.
  std::size_t threads = 0;

  double eta(std::size_t round) const;
  std::size_t deploy_count(std::size_t clients) const;
  std::size_t report_count(std::size_t clients) const;
  std::size_t effective_tau(std::size_t clients) const;
  // Throws ConfigError naming the offending field.
  void validate(std::size_t clients) const;
};

struct Metrics {
  double accuracy = 0.0;
  double loss = 0.0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::uint64_t fingerprint = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double test_loss = 0.0;
  // Client ids of the updates aggregated this round, in aggregation order.
  std::vector<std::size_t> participants;
  std::size_t aggregations = 0;
  std::uint64_t messages = 0;
  std::uint64_t bytes = 0;
};

struct RoundHistory {
  Metrics initial;
  std::vector<RoundRecord> rounds;
  bool diverged = false;
  std::string divergence;
  // Shard reads: one per local_train / central_optimize call.
  std::size_t public_reads = 0;
  std::size_t private_reads = 0;
  ParameterVector final_params;
  NetTrace trace;
  CommTotals comm;

  Metrics final_metrics() const;
};

// Shards appended to each client's data at the start of a round: entry t-1
// holds one shard per client for round t.
struct ArrivalSchedule {
  std::vector<std::vector<Shard>> increments;
};

ClientUpdate local_train(const ParameterVector& global, const ModelSpec& spec, const Shard& shard,
                         std::size_t epochs, double lr, std::size_t batch_size,
                         std::uint64_t seed, std::size_t client_id = 0, std::size_t round = 1);

std::vector<std::size_t> select_clients(std::span<const std::size_t> client_ids, double fraction,
                                        std::size_t round, std::uint64_t seed);

// w_prev + eta * sum_k weight_k * delta_k, summed in ascending client_id order.
ParameterVector aggregate(const ParameterVector& w_prev, std::span<const ClientUpdate> updates,
                          double eta, Weighting weighting = Weighting::kNormalized);

std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates,
                                        Weighting weighting);

ParameterVector central_optimize(const ParameterVector& w, const ModelSpec& spec,
                                 const Shard& public_shard, std::size_t epochs, double lr,
                                 std::size_t batch_size, std::uint64_t seed);

Metrics evaluate(const ModelSpec& spec, const ParameterVector& params, const Shard& test);

RoundHistory run_fedavg(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
                        const Shard& test, const ArrivalSchedule* arrivals = nullptr);
RoundHistory run_ffm(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
                     const Shard& test, const ArrivalSchedule* arrivals = nullptr);
RoundHistory run_centralized(const FedConfig& config, const PartitionPlan& plan,
                             const ModelSpec& spec, const Shard& test);

// Dispatches on config.mode.
RoundHistory run_regime(const FedConfig& config, const PartitionPlan& plan, const ModelSpec& spec,
                        const Shard& test, const ArrivalSchedule* arrivals = nullptr);

// Seeds used by the runners, exposed so tests can replay a run by hand.
namespace seeds {
std::uint64_t init(std::uint64_t run_seed);
std::uint64_t local(std::uint64_t run_seed, std::size_t round, std::size_t client);
std::uint64_t central(std::uint64_t run_seed, std::size_t round);
std::uint64_t epoch(std::uint64_t phase_seed, std::size_t epoch);
}  // namespace seeds

}  // namespace fedsim
