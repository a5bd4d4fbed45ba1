#include "fedsim/simnet.hpp"

#include <algorithm>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "fedsim/seed.hpp"

namespace fedsim {

std::string_view tag_name(PayloadTag tag) {
  switch (tag) {
    case PayloadTag::kDeploy: return "deploy";
    case PayloadTag::kUpdate: return "update";
    case PayloadTag::kControl: return "control";
  }
  return "unknown";
}

bool is_model_payload(PayloadTag tag) {
  return tag == PayloadTag::kDeploy || tag == PayloadTag::kUpdate;
}

LatencyModel LatencyModel::uniform(std::size_t nodes, double base, double jitter,
                                   std::uint64_t seed) {
  return {std::vector<double>(nodes, base), std::vector<double>(nodes, jitter), seed};
}

Network::Network(LatencyModel latency) : latency_(std::move(latency)) {
  if (latency_.base.size() != latency_.jitter.size()) {
    throw std::invalid_argument("latency model needs one jitter entry per node");
  }
  for (std::size_t i = 0; i < latency_.nodes(); ++i) {
    if (!(latency_.base[i] >= 0.0) || !(latency_.jitter[i] >= 0.0)) {
      throw std::invalid_argument("latency base and jitter must be >= 0 (node " +
                                  std::to_string(i) + ")");
    }
  }
}

Event Network::send(NodeId src, NodeId dst, PayloadTag tag, std::uint64_t size_bytes,
                    double now) {
  if (src >= latency_.nodes() || dst >= latency_.nodes()) {
    throw std::out_of_range("unknown node in send " + std::to_string(src) + " -> " +
                            std::to_string(dst) + " (network has " +
                            std::to_string(latency_.nodes()) + " nodes)");
  }
  if (!(now >= 0.0)) throw std::invalid_argument("send time must be >= 0");
  Event ev;
  ev.sent_at = now;
  ev.seq = next_seq_++;
  ev.src = src;
  ev.dst = dst;
  ev.tag = tag;
  ev.size_bytes = size_bytes;
  double offset = latency_.base[src];
  if (latency_.jitter[src] > 0.0) {
    Rng rng(derive_seed(latency_.seed, {ev.seq}));
    std::uniform_real_distribution<double> u(-latency_.jitter[src], latency_.jitter[src]);
    offset += u(rng);
  }
  ev.deliver_at = now + std::max(0.0, offset);
  queue_.push(ev);
  return ev;
}

std::optional<Event> Network::next_event() {
  if (queue_.empty()) return std::nullopt;
  Event ev = queue_.top();
  queue_.pop();
  trace_.push_back(ev);
  return ev;
}

CommTotals comm_totals(const NetTrace& trace, std::size_t param_count) {
  CommTotals totals;
  for (const auto& ev : trace) {
    ++totals.messages;
    totals.bytes += is_model_payload(ev.tag) ? model_payload_bytes(param_count) : ev.size_bytes;
  }
  return totals;
}

void write_trace_jsonl(const NetTrace& trace, std::ostream& out) {
  for (const auto& ev : trace) {
    nlohmann::ordered_json line;
    line["deliver_at"] = ev.deliver_at;
    line["seq"] = ev.seq;
    line["src"] = ev.src;
    line["dst"] = ev.dst;
    line["tag"] = tag_name(ev.tag);
    line["size_bytes"] = ev.size_bytes;
    out << line.dump() << '\n';
  }
}

}  // namespace fedsim
