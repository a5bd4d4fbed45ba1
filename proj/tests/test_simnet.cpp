#include <algorithm>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fedsim/simnet.hpp"
#include "json.hpp"

using namespace fedsim;

namespace {

std::vector<Event> drain(Network& net) {
  std::vector<Event> out;
  while (auto ev = net.next_event()) out.push_back(*ev);
  return out;
}

}  // namespace

TEST_SUITE("simnet") {

TEST_CASE("zero jitter delivers at now plus base") {
  Network net(LatencyModel::uniform(3, 2.0, 0.0, 1));
  const auto ev = net.send(0, 1, PayloadTag::kDeploy, 100, 1.0);
  CHECK(ev.deliver_at == 3.0);
  CHECK(ev.sent_at == 1.0);
  const auto got = net.next_event();
  REQUIRE(got.has_value());
  CHECK(got->deliver_at == 3.0);
  CHECK_FALSE(net.next_event().has_value());
}

TEST_CASE("simultaneous sends get distinct seq and keep send order") {
  Network net(LatencyModel::uniform(4, 1.0, 0.0, 1));
  const auto a = net.send(0, 1, PayloadTag::kDeploy, 1, 0.0);
  const auto b = net.send(0, 2, PayloadTag::kDeploy, 1, 0.0);
  const auto c = net.send(0, 3, PayloadTag::kDeploy, 1, 0.0);
  CHECK(a.seq < b.seq);
  CHECK(b.seq < c.seq);
  const auto out = drain(net);
  REQUIRE(out.size() == 3);
  CHECK(out[0].dst == 1);
  CHECK(out[1].dst == 2);
  CHECK(out[2].dst == 3);
}

TEST_CASE("earlier delivery first regardless of send order") {
  LatencyModel lat = LatencyModel::uniform(3, 0.0, 0.0, 1);
  lat.base[1] = 3.0;
  lat.base[2] = 1.0;
  Network net(lat);
  net.send(1, 0, PayloadTag::kUpdate, 1, 0.0);
  net.send(2, 0, PayloadTag::kUpdate, 1, 0.0);
  const auto out = drain(net);
  CHECK(out[0].deliver_at == 1.0);
  CHECK(out[1].deliver_at == 3.0);
}

TEST_CASE("draining matches an independent sort and is deterministic in seed") {
  auto schedule = [](std::uint64_t seed) {
    Network net(LatencyModel::uniform(6, 0.5, 0.4, seed));
    std::mt19937_64 rng(123);
    std::vector<Event> sent;
    for (int i = 0; i < 200; ++i) {
      const NodeId src = rng() % 6, dst = rng() % 6;
      const double now = static_cast<double>(rng() % 50) * 0.1;
      sent.push_back(net.send(src, dst, PayloadTag::kControl, 8, now));
    }
    return std::pair{sent, drain(net)};
  };
  auto [sent, delivered] = schedule(7);
  std::stable_sort(sent.begin(), sent.end(), [](const Event& a, const Event& b) {
    return a.deliver_at != b.deliver_at ? a.deliver_at < b.deliver_at : a.seq < b.seq;
  });
  REQUIRE(delivered.size() == sent.size());
  for (std::size_t i = 0; i < sent.size(); ++i) {
    CHECK(delivered[i].seq == sent[i].seq);
    CHECK(delivered[i].deliver_at >= delivered[i].sent_at);
    CHECK(delivered[i].deliver_at - delivered[i].sent_at <= 0.9 + 1e-12);
  }
  const auto again = schedule(7).second;
  const auto other = schedule(8).second;
  bool same = true, differs = false;
  for (std::size_t i = 0; i < delivered.size(); ++i) {
    same &= again[i].deliver_at == delivered[i].deliver_at && again[i].seq == delivered[i].seq;
    differs |= other[i].deliver_at != delivered[i].deliver_at;
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("jitter larger than base clamps the offset at zero") {
  Network net(LatencyModel::uniform(2, 0.0, 5.0, 3));
  for (int i = 0; i < 50; ++i) {
    const auto ev = net.send(0, 1, PayloadTag::kControl, 1, 2.0);
    CHECK(ev.deliver_at >= 2.0);
  }
}

TEST_CASE("trace records deliveries in order") {
  Network net(LatencyModel::uniform(3, 1.0, 0.3, 9));
  for (int i = 0; i < 20; ++i) net.send(i % 3, (i + 1) % 3, PayloadTag::kUpdate, 1, 0.0);
  CHECK(net.pending() == 20);
  drain(net);
  CHECK(net.pending() == 0);
  const auto& trace = net.trace();
  REQUIRE(trace.size() == 20);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const bool ordered = trace[i - 1].deliver_at < trace[i].deliver_at ||
                         (trace[i - 1].deliver_at == trace[i].deliver_at && trace[i - 1].seq < trace[i].seq);
    CHECK(ordered);
  }
}

TEST_CASE("invalid sends and latency models are rejected") {
  Network net(LatencyModel::uniform(2, 1.0, 0.0, 1));
  CHECK_THROWS_AS(net.send(0, 2, PayloadTag::kDeploy, 1, 0.0), std::out_of_range);
  CHECK_THROWS_AS(net.send(5, 0, PayloadTag::kDeploy, 1, 0.0), std::out_of_range);
  CHECK_THROWS_AS(net.send(0, 1, PayloadTag::kDeploy, 1, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(Network{LatencyModel::uniform(2, -1.0, 0.0, 1)}, std::invalid_argument);
  LatencyModel ragged = LatencyModel::uniform(3, 1.0, 0.0, 1);
  ragged.jitter.pop_back();
  CHECK_THROWS_AS(Network{ragged}, std::invalid_argument);
}

TEST_CASE("comm_totals") {
  CHECK(comm_totals({}, 10) == CommTotals{0, 0});
  CHECK(model_payload_bytes(10) == 144);

  Network one(LatencyModel::uniform(2, 1.0, 0.0, 1));
  one.send(0, 1, PayloadTag::kDeploy, model_payload_bytes(10), 0.0);
  drain(one);
  CHECK(comm_totals(one.trace(), 10) == CommTotals{1, 144});

  // One synchronous round: deploy to 10 clients, 10 uploads back.
  Network net(LatencyModel::uniform(11, 1.0, 0.0, 1));
  for (std::size_t k = 0; k < 10; ++k)
    net.send(kServerNode, client_node(k), PayloadTag::kDeploy, model_payload_bytes(10), 0.0);
  for (auto ev = net.next_event(); ev; ev = net.next_event())
    if (ev->tag == PayloadTag::kDeploy)
      net.send(ev->dst, kServerNode, PayloadTag::kUpdate, model_payload_bytes(10), ev->deliver_at);
  const auto totals = comm_totals(net.trace(), 10);
  CHECK(totals.messages == 20);
  CHECK(totals.bytes == 20 * 144);

  NetTrace control{Event{0.0, 1.0, 0, 0, 1, PayloadTag::kControl, 16}};
  CHECK(comm_totals(control, 10) == CommTotals{1, 16});
}

TEST_CASE("node ids and tags") {
  CHECK(client_node(0) == 1);
  CHECK(node_client(client_node(7)) == 7);
  CHECK(tag_name(PayloadTag::kDeploy) == "deploy");
  CHECK(tag_name(PayloadTag::kUpdate) == "update");
  CHECK(is_model_payload(PayloadTag::kUpdate));
  CHECK_FALSE(is_model_payload(PayloadTag::kControl));
}

TEST_CASE("trace exports one JSON object per line") {
  Network net(LatencyModel::uniform(3, 0.25, 0.0, 1));
  net.send(0, 1, PayloadTag::kDeploy, 144, 0.0);
  net.send(2, 0, PayloadTag::kUpdate, 144, 0.5);
  drain(net);
  std::ostringstream out;
  write_trace_jsonl(net.trace(), out);
  std::istringstream in(out.str());
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0]["deliver_at"] == 0.25);
  CHECK(rows[0]["seq"] == 0);
  CHECK(rows[0]["src"] == 0);
  CHECK(rows[0]["dst"] == 1);
  CHECK(rows[0]["tag"] == "deploy");
  CHECK(rows[0]["size_bytes"] == 144);
  CHECK(rows[1]["deliver_at"] == 0.75);
  CHECK(rows[1]["tag"] == "update");
}

}  // TEST_SUITE
