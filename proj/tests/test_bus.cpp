#include "doctest.h"
#include "icsfuzz/bus.hpp"
#include "icsfuzz/clock.hpp"

using namespace icsfuzz;
using namespace icsfuzz::bus;
using nlohmann::json;

namespace {

BusMessage control(const std::string& sender, const std::string& event,
                   json data = json::object()) {
    BusMessage m;
    m.topic = "control";
    m.event = event;
    m.sender = sender;
    m.data = std::move(data);
    return m;
}

}  // namespace

TEST_CASE("publish fans out to all subscribers in per-sender order") {
    VirtualClock clock;
    InProcessBus bus(clock);
    auto sub1 = bus.subscribe("control", "a1");
    auto sub2 = bus.subscribe("control", "a2");

    bus.publish(control("s", "first"));
    bus.publish(control("s", "second"));

    for (auto& sub : {sub1, sub2}) {
        auto m1 = sub->poll();
        auto m2 = sub->poll();
        REQUIRE(m1);
        REQUIRE(m2);
        CHECK(m1->event == "first");
        CHECK(m2->event == "second");
        CHECK(m1->seq < m2->seq);
    }
}

TEST_CASE("publish with no subscribers is acknowledged, delivered to none") {
    VirtualClock clock;
    InProcessBus bus(clock);
    bus.publish(control("s", "noop"));
    CHECK(bus.sent() == 1);
    CHECK(bus.delivered() == 1);
    auto late = bus.subscribe("control", "late");
    CHECK(late->pending() == 0);  // no replay
}

TEST_CASE("no replay: messages published before subscribing are not delivered") {
    VirtualClock clock;
    InProcessBus bus(clock);
    bus.publish(control("s", "early"));
    auto sub = bus.subscribe("control", "a");
    bus.publish(control("s", "late"));
    auto m = sub->poll();
    REQUIRE(m);
    CHECK(m->event == "late");
    CHECK_FALSE(sub->poll());
}

TEST_CASE("two interleaved senders keep per-sender order") {
    VirtualClock clock;
    InProcessBus bus(clock);
    auto sub = bus.subscribe("control", "a");
    for (int i = 0; i < 50; ++i) {
        bus.publish(control("alpha", "a" + std::to_string(i)));
        bus.publish(control("beta", "b" + std::to_string(i)));
    }
    uint64_t last_alpha = 0, last_beta = 0;
    while (auto m = sub->poll()) {
        uint64_t& last = m->sender == "alpha" ? last_alpha : last_beta;
        CHECK(m->seq == last + 1);
        last = m->seq;
    }
    CHECK(last_alpha == 50);
    CHECK(last_beta == 50);
}

TEST_CASE("transport down: bounded buffer with oldest-dropped accounting") {
    VirtualClock clock;
    InProcessBus bus(clock, /*buffer_capacity=*/1000);
    auto sub = bus.subscribe("control", "a");
    bus.pause();
    for (int i = 0; i < 1001; ++i) {
        bus.publish(control("s", "e" + std::to_string(i)));
    }
    CHECK(bus.dropped() == 1);
    CHECK(bus.buffered() == 1000);
    CHECK(bus.sent() == 1001);
    bus.resume();
    CHECK(bus.buffered() == 0);
    // drop accounting: sent - delivered - buffered = dropped
    CHECK(bus.sent() - bus.delivered() - bus.buffered() == bus.dropped());
    auto first = sub->poll();
    REQUIRE(first);
    CHECK(first->event == "e1");  // e0 was dropped as the oldest
}

TEST_CASE("schema violations are rejected") {
    VirtualClock clock;
    InProcessBus bus(clock);
    BusMessage bad;
    bad.topic = "bogus";
    bad.event = "x";
    bad.sender = "s";
    bad.data = json::object();
    CHECK_THROWS_AS(bus.publish(bad), SchemaViolation);

    BusMessage seed;
    seed.topic = "seed";
    seed.event = "seed";
    seed.sender = "s";
    seed.data = json{{"seed_id", "s1"}};  // missing keys
    CHECK_THROWS_AS(bus.publish(seed), SchemaViolation);

    seed.data = json{{"seed_id", "s1"},
                     {"protocol_id", "modbus_tcp"},
                     {"fields", json::object()},
                     {"provenance", "synthetic"},
                     {"extra", 1}};
    CHECK_THROWS_AS(bus.publish(seed), SchemaViolation);

    seed.data.erase("extra");
    CHECK_NOTHROW(bus.publish(seed));
}

TEST_CASE("heartbeat payload matches the wire schema") {
    auto m = make_heartbeat("SeedAgent-0");
    CHECK(m.topic == "heartbeat");
    CHECK(m.event == "heartbeat");
    CHECK(m.data == json{{"agent_id", "SeedAgent-0"}, {"status", "alive"}});
    CHECK_NOTHROW(check_schema(m));
}

TEST_CASE("heartbeat loop: 12 +/- 1 beats over 60 virtual seconds") {
    VirtualClock clock;
    InProcessBus bus(clock);
    auto sub = bus.subscribe("heartbeat", "monitor");
    HeartbeatPacer pacer("agent", 5000);
    for (int64_t t = 0; t <= 60000; t += 250) {
        clock.advance(250);
        pacer.maybe_beat(bus, clock.now_ms());
    }
    size_t beats = sub->pending();
    CHECK(beats >= 11);
    CHECK(beats <= 13);
}

TEST_CASE("failure detection: threshold and idempotence") {
    Registry reg;
    reg.register_agent("m1", AgentRole::Mutation, 0);
    reg.register_agent("m2", AgentRole::Mutation, 0);

    reg.heartbeat("m1", 3000);
    reg.heartbeat("m2", 0);

    // 12s since m2's beat, timeout 15s: not failed
    CHECK(reg.detect_failures(12000, 15000).empty());
    // 16s since m2's beat: failed
    auto failed = reg.detect_failures(16000, 15000);
    REQUIRE(failed.size() == 1);
    CHECK(failed[0] == "m2");
    // re-scan: already failed, no duplicate transition
    CHECK(reg.detect_failures(17000, 15000).empty());
    CHECK(reg.find("m2")->status == AgentStatus::Failed);
}

TEST_CASE("an agent that heartbeats within timeout is never marked failed") {
    Registry reg;
    reg.register_agent("a", AgentRole::Seed, 0);
    VirtualClock clock;
    int64_t interval = 5000, timeout = 15000;
    int64_t last_beat = 0;
    for (int step = 0; step < 2000; ++step) {
        clock.advance(997);  // co-prime with the interval to sweep phases
        if (clock.now_ms() - last_beat >= interval) {
            reg.heartbeat("a", clock.now_ms());
            last_beat = clock.now_ms();
        }
        CHECK(reg.detect_failures(clock.now_ms(), timeout).empty());
    }
}

TEST_CASE("redistribute: least-loaded-first with lexicographic ties") {
    Registry reg;
    reg.register_agent("dead", AgentRole::Mutation, 0);
    reg.register_agent("a", AgentRole::Mutation, 0);
    reg.register_agent("b", AgentRole::Mutation, 0);
    reg.assign_task("a", "p1");
    for (const auto& t : {"q1", "q2", "q3"}) reg.assign_task("b", t);
    for (const auto& t : {"t1", "t2", "t3", "t4"}) reg.assign_task("dead", t);

    reg.detect_failures(20000, 15000);  // only "dead" has no recent beat
    reg.heartbeat("a", 19000);
    reg.heartbeat("b", 19000);
    // restore: detect_failures above may have failed a and b too; re-register
    reg.register_agent("a", AgentRole::Mutation, 20000);
    reg.register_agent("b", AgentRole::Mutation, 20000);

    auto outcome = reg.redistribute("dead");
    CHECK(outcome.parked.empty());
    REQUIRE(outcome.assignments.size() == 4);
    // loads (1,3) -> t1,t2 to a; tie at 3 -> lexicographic a gets t3; t4 to b
    CHECK(outcome.assignments.at("t1") == "a");
    CHECK(outcome.assignments.at("t2") == "a");
    CHECK(outcome.assignments.at("t3") == "a");
    CHECK(outcome.assignments.at("t4") == "b");
    CHECK(reg.find("a")->assigned_tasks.size() == 4);
    CHECK(reg.find("b")->assigned_tasks.size() == 4);
    CHECK(reg.find("dead")->assigned_tasks.empty());
}

TEST_CASE("redistribute: no candidate parks the tasks") {
    Registry reg;
    reg.register_agent("solo", AgentRole::Seed, 0);
    reg.assign_task("solo", "s1");
    reg.detect_failures(20000, 15000);
    auto outcome = reg.redistribute("solo");
    CHECK(outcome.assignments.empty());
    REQUIRE(outcome.parked.size() == 1);
    CHECK(reg.parked(AgentRole::Seed).size() == 1);

    // next alive registration of the role claims the parked work
    reg.register_agent("solo2", AgentRole::Seed, 30000);
    auto claimed = reg.claim_parked(AgentRole::Seed);
    REQUIRE(claimed.size() == 1);
    CHECK(claimed[0] == "s1");
    CHECK(reg.parked(AgentRole::Seed).empty());
}

TEST_CASE("redistribute: zero tasks yields an empty map") {
    Registry reg;
    reg.register_agent("dead", AgentRole::Mutation, 0);
    reg.register_agent("peer", AgentRole::Mutation, 0);
    reg.detect_failures(20000, 15000);
    reg.register_agent("peer", AgentRole::Mutation, 20000);
    auto outcome = reg.redistribute("dead");
    CHECK(outcome.assignments.empty());
    CHECK(outcome.parked.empty());
}
