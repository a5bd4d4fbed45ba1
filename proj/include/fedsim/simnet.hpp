#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <queue>
#include <string_view>
#include <vector>

namespace fedsim {

// Node 0 is the server; client k is node k + 1.
using NodeId = std::size_t;
inline constexpr NodeId kServerNode = 0;
constexpr NodeId client_node(std::size_t client_id) { return client_id + 1; }
constexpr std::size_t node_client(NodeId node) { return node - 1; }

enum class PayloadTag { kDeploy, kUpdate, kControl };

std::string_view tag_name(PayloadTag tag);
bool is_model_payload(PayloadTag tag);

// 8 bytes per 64-bit parameter plus a 64-byte header.
constexpr std::uint64_t model_payload_bytes(std::size_t param_count) {
  return 8 * static_cast<std::uint64_t>(param_count) + 64;
}

struct Event {
  double sent_at = 0.0;
  double deliver_at = 0.0;
  std::uint64_t seq = 0;
  NodeId src = 0;
  NodeId dst = 0;
  PayloadTag tag = PayloadTag::kControl;
  std::uint64_t size_bytes = 0;
};

// Per-node constant delay plus uniform jitter in [-jitter, +jitter].
struct LatencyModel {
  std::vector<double> base;
  std::vector<double> jitter;
  std::uint64_t seed = 0;

  static LatencyModel uniform(std::size_t nodes, double base, double jitter, std::uint64_t seed);
  std::size_t nodes() const { return base.size(); }
};

struct CommTotals {
  std::uint64_t messages = 0;
  std::uint64_t bytes = 0;
  bool operator==(const CommTotals&) const = default;
};

using NetTrace = std::vector<Event>;

// Deterministic discrete-event message layer in virtual time.
class Network {
 public:
  explicit Network(LatencyModel latency);

  // Latency is drawn from (seed, seq) and applied from src's entry.
  Event send(NodeId src, NodeId dst, PayloadTag tag, std::uint64_t size_bytes, double now);

  // Removes the pending event with the smallest (deliver_at, seq); nullopt
  // once nothing is in flight. Delivered events are appended to the trace.
  std::optional<Event> next_event();

  std::size_t pending() const { return queue_.size(); }
  const NetTrace& trace() const { return trace_; }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      return a.deliver_at != b.deliver_at ? a.deliver_at > b.deliver_at : a.seq > b.seq;
    }
  };

  LatencyModel latency_;
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  NetTrace trace_;
};

// Model payloads count 8 * param_count + 64 bytes; others their own size.
CommTotals comm_totals(const NetTrace& trace, std::size_t param_count);

// One JSON object per line: deliver_at, seq, src, dst, tag, size_bytes.
void write_trace_jsonl(const NetTrace& trace, std::ostream& out);

}  // namespace fedsim
