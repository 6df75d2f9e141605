#include <thread>

#include "doctest.h"
#include "icsfuzz/harness.hpp"
#include "icsfuzz/protocol.hpp"
#include "icsfuzz/rng.hpp"
#include "icsfuzz/simulator.hpp"
#include "support/fixtures.hpp"
#include "support/frame_gen.hpp"

// The raw-socket helpers are internal, but the exhaustion test needs to speak
// the wire directly; reaching into the implementation header is deliberate.
#include "../core/src/net_util.hpp"

using namespace icsfuzz;
using namespace icsfuzz::harness;
using testsupport::fixture_path;

namespace {

proto::ProtocolSpec& modbus_spec() {
    static proto::ProtocolSpec spec = proto::parse_spec_file(fixture_path("specs/modbus_tcp.spec"));
    return spec;
}

TargetEndpoint endpoint_for(uint16_t port, bool resource_channel = false) {
    TargetEndpoint ep;
    ep.port = port;
    ep.protocol_id = "modbus_tcp";
    ep.resource_channel = resource_channel;
    return ep;
}

Bytes hex(const std::string& s) { return *from_hex(s); }

// fc16 write with byte_count disagreeing with the data section
Bytes malformed_fc16(uint16_t transaction) {
    Bytes pdu = {0x10, 0x00, 0x10, 0x00, 0x02, 0x09, 0xAA, 0xBB, 0xCC, 0xDD};
    Bytes out;
    out.push_back(static_cast<uint8_t>(transaction >> 8));
    out.push_back(static_cast<uint8_t>(transaction));
    out.insert(out.end(), {0x00, 0x00});
    out.push_back(static_cast<uint8_t>((pdu.size() + 1) >> 8));
    out.push_back(static_cast<uint8_t>(pdu.size() + 1));
    out.push_back(0x01);
    out.insert(out.end(), pdu.begin(), pdu.end());
    return out;
}

Bytes valid_fc16(uint16_t transaction) {
    Bytes pdu = {0x10, 0x00, 0x10, 0x00, 0x02, 0x04, 0xAA, 0xBB, 0xCC, 0xDD};
    Bytes out;
    out.push_back(static_cast<uint8_t>(transaction >> 8));
    out.push_back(static_cast<uint8_t>(transaction));
    out.insert(out.end(), {0x00, 0x00, 0x00, 0x0B, 0x01});
    out.insert(out.end(), pdu.begin(), pdu.end());
    return out;
}

}  // namespace

TEST_CASE("healthy simulator echoes a valid FC-03 request") {
    SimulatorConfig cfg;
    cfg.port = 15610;
    auto sim = Simulator::start(cfg);
    REQUIRE(sim.ok());

    Injector injector(endpoint_for(cfg.port), modbus_spec());
    auto obs = injector.inject("c1", hex("00010000000601030000000a"));
    CHECK(obs.outcome == OutcomeKind::Reply);
    CHECK(obs.liveness_after == Liveness::Alive);
    REQUIRE(obs.reply.size() >= 9);
    CHECK(obs.reply[7] == 0x03);             // fc echoed
    CHECK(obs.reply[8] == 20);               // 10 registers -> 20 data bytes
    CHECK(reply_well_formed(obs.reply, "modbus_tcp"));
    CHECK_FALSE(reply_is_exception(obs.reply, "modbus_tcp"));
}

TEST_CASE("simulator: full function-code semantics round") {
    SimulatorConfig cfg;
    cfg.port = 15611;
    auto sim = Simulator::start(cfg);
    REQUIRE(sim.ok());
    Injector injector(endpoint_for(cfg.port), modbus_spec());

    // write a register, read it back
    auto w = injector.inject("w", hex("000100000006010600200777"));
    REQUIRE(w.outcome == OutcomeKind::Reply);
    CHECK(w.reply == hex("000100000006010600200777"));  // echo

    auto r = injector.inject("r", hex("000200000006010300200001"));
    REQUIRE(r.outcome == OutcomeKind::Reply);
    CHECK(r.reply == hex("0002000000050103020777"));

    // coil on, read it back
    auto c = injector.inject("c", hex("00030000000601050015ff00"));
    REQUIRE(c.outcome == OutcomeKind::Reply);
    CHECK(c.reply == hex("00030000000601050015ff00"));
    auto cr = injector.inject("cr", hex("000400000006010100150001"));
    REQUIRE(cr.outcome == OutcomeKind::Reply);
    CHECK(cr.reply == hex("00040000000401010101"));

    // undefined function code draws an illegal-function exception
    auto x = injector.inject("x", hex("000500000006015c0000000a"));
    REQUIRE(x.outcome == OutcomeKind::Reply);
    CHECK(reply_is_exception(x.reply, "modbus_tcp"));
    CHECK(x.reply[8] == 0x01);
}

TEST_CASE("session exhaustion: 64 dirty registrations refuse the 65th connection") {
    SimulatorConfig cfg;
    cfg.port = 15612;
    cfg.bugs_enabled = {kBugSessionExhaustion};
    cfg.session_limit = 64;
    auto sim = Simulator::start(cfg);
    REQUIRE(sim.ok());

    // Degradation first: stale sessions past the busy watermark draw busy
    // exceptions for the canonical probe.
    Injector injector(endpoint_for(cfg.port), modbus_spec());
    bool saw_degraded = false;

    for (int i = 0; i < 64; ++i) {
        auto sock = net::tcp_connect("127.0.0.1", cfg.port, 300);
        REQUIRE(sock.has_value());
        // malformed registration: nonzero MBAP protocol id, never released
        net::send_all(sock->fd(), hex("000199990006010300000001"));
        Bytes sink;
        net::recv_some(sock->fd(), sink, 30);
        sock->close();
        if (i == 52) {  // past the 75% watermark
            auto probe = injector.probe_liveness();
            if (probe.state == Liveness::Degraded) saw_degraded = true;
        }
    }
    CHECK(saw_degraded);

    // give the serve loop a beat to account the final dirty close
    for (int i = 0; i < 100 && sim.value()->serving(); ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    CHECK(sim.value()->stats().exhausted);
    CHECK(sim.value()->stats().stale_sessions >= 64);

    auto refused = net::tcp_connect("127.0.0.1", cfg.port, 200);
    CHECK_FALSE(refused.has_value());
    CHECK(injector.probe_liveness().state == Liveness::Down);

    // restart clears the pool
    sim.value()->restart();
    CHECK(sim.value()->serving());
    CHECK(sim.value()->stats().stale_sessions == 0);
    CHECK(injector.probe_liveness().state == Liveness::Alive);
}

TEST_CASE("length overflow crash: declared length far beyond payload kills the process") {
    SimulatorConfig cfg;
    cfg.port = 15613;
    cfg.bugs_enabled = {kBugLengthOverflowCrash};
    auto sim = Simulator::start(cfg);
    REQUIRE(sim.ok());
    Injector injector(endpoint_for(cfg.port), modbus_spec());

    // declared length 0x10 but only 6 PDU bytes follow: gap > 2
    auto obs = injector.inject("boom", hex("00010000001001030000000a"));
    CHECK((obs.outcome == OutcomeKind::Timeout || obs.outcome == OutcomeKind::ConnectionReset));
    CHECK(obs.liveness_after == Liveness::Down);
    CHECK(sim.value()->stats().crashed);

    // a gap of exactly 2 must NOT crash (off-by-one guard on the trigger)
    sim.value()->restart();
    REQUIRE(sim.value()->serving());
    auto mild = injector.inject("mild", hex("00010000000801030000000a"));
    CHECK_FALSE(sim.value()->stats().crashed);
    CHECK(mild.liveness_after == Liveness::Alive);

    // deterministic replay: the same trigger crashes again after restart
    auto again = injector.inject("boom2", hex("00010000001001030000000a"));
    CHECK(again.liveness_after == Liveness::Down);
    CHECK(sim.value()->stats().crashed);
}

TEST_CASE("io halt: a burst of malformed FC-16 writes kills the write path until restart") {
    SimulatorConfig cfg;
    cfg.port = 15614;
    cfg.bugs_enabled = {kBugIoHaltOnBurst};
    auto sim = Simulator::start(cfg);
    REQUIRE(sim.ok());
    Injector injector(endpoint_for(cfg.port), modbus_spec());

    // single malformed write: exception reply, still alive
    auto one = injector.inject("m0", malformed_fc16(100));
    CHECK(one.outcome == OutcomeKind::Reply);
    CHECK(reply_is_exception(one.reply, "modbus_tcp"));
    CHECK(one.liveness_after == Liveness::Alive);
    CHECK_FALSE(sim.value()->stats().write_halted);

    for (uint16_t i = 1; i < 5; ++i) injector.inject("m" + std::to_string(i), malformed_fc16(100 + i));
    CHECK(sim.value()->stats().write_halted);

    // write path dead: even a valid write times out; reads still answer
    auto w = injector.inject("w", valid_fc16(200));
    CHECK(w.outcome == OutcomeKind::Timeout);
    auto r = injector.inject("r", hex("000700000006010300000001"));
    CHECK(r.outcome == OutcomeKind::Reply);
    CHECK(r.liveness_after == Liveness::Alive);  // canonical read probe still fine

    sim.value()->restart();
    auto w2 = injector.inject("w2", valid_fc16(300));
    CHECK(w2.outcome == OutcomeKind::Reply);
    CHECK_FALSE(sim.value()->stats().write_halted);
}

TEST_CASE("injection to a closed port yields a connection-refused observation") {
    Injector injector(endpoint_for(15699), modbus_spec());
    auto obs = injector.inject("nope", hex("00010000000601030000000a"));
    CHECK(obs.outcome == OutcomeKind::ConnectionRefused);
    CHECK(obs.liveness_after == Liveness::Down);
}

TEST_CASE("resource channel trailer is stripped and reported") {
    SimulatorConfig cfg;
    cfg.port = 15615;
    cfg.resource_channel = true;
    cfg.bugs_enabled = {kBugSessionExhaustion};
    cfg.session_limit = 10;
    auto sim = Simulator::start(cfg);
    REQUIRE(sim.ok());
    Injector injector(endpoint_for(cfg.port, /*resource_channel=*/true), modbus_spec());

    auto obs = injector.inject("r0", hex("000100000006010300000001"));
    REQUIRE(obs.outcome == OutcomeKind::Reply);
    CHECK(reply_well_formed(obs.reply, "modbus_tcp"));
    CHECK(obs.resource_signal == doctest::Approx(0.0));

    // leak three sessions and observe the signal rise
    for (int i = 0; i < 3; ++i) {
        auto sock = net::tcp_connect("127.0.0.1", cfg.port, 300);
        REQUIRE(sock.has_value());
        net::send_all(sock->fd(), hex("000199990006010300000001"));
        Bytes sink;
        net::recv_some(sock->fd(), sink, 30);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    auto obs2 = injector.inject("r1", hex("000200000006010300000001"));
    REQUIRE(obs2.outcome == OutcomeKind::Reply);
    CHECK(obs2.resource_signal == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("crash ledger: consecutive down probes collapse into one event") {
    auto mk = [](Liveness l) {
        Observation o;
        o.liveness_after = l;
        return o;
    };
    std::vector<Observation> obs{mk(Liveness::Alive), mk(Liveness::Down), mk(Liveness::Down),
                                 mk(Liveness::Alive)};
    auto events = crash_ledger(obs);
    REQUIRE(events.size() == 1);
    CHECK(events[0].open_index == 1);
    CHECK(events[0].close_index == 3);
}

TEST_CASE("crash ledger: separated outages count separately, degraded does not open") {
    auto mk = [](Liveness l) {
        Observation o;
        o.liveness_after = l;
        return o;
    };
    std::vector<Observation> two{mk(Liveness::Down), mk(Liveness::Alive), mk(Liveness::Degraded),
                                 mk(Liveness::Down), mk(Liveness::Alive)};
    CHECK(crash_ledger(two).size() == 2);

    std::vector<Observation> none{mk(Liveness::Alive), mk(Liveness::Degraded),
                                  mk(Liveness::Degraded), mk(Liveness::Alive)};
    CHECK(crash_ledger(none).empty());

    // dedup bound: events <= transitions to down
    std::vector<Observation> mixed{mk(Liveness::Down), mk(Liveness::Down), mk(Liveness::Alive),
                                   mk(Liveness::Down)};
    CHECK(crash_ledger(mixed).size() <= 2);
    CHECK(crash_ledger(mixed).size() == 2);
}

TEST_CASE("mini-soak: valid traffic against the bug-free simulator stays clean") {
    SimulatorConfig cfg;
    cfg.port = 15616;
    auto sim = Simulator::start(cfg);
    REQUIRE(sim.ok());
    auto& spec = modbus_spec();
    Injector injector(endpoint_for(cfg.port), modbus_spec());
    RngStream rng(77);

    CrashTracker tracker;
    size_t replies = 0, n = 300;
    for (size_t i = 0; i < n; ++i) {
        auto frame = testsupport::random_valid_frame(spec, rng, /*sut_safe=*/true);
        auto bytes = proto::encode_frame(frame, spec);
        REQUIRE(bytes.ok());
        auto obs = injector.inject("soak" + std::to_string(i), bytes.value());
        if (obs.outcome == OutcomeKind::Reply) ++replies;
        tracker.feed(obs, i);
        if (obs.outcome == OutcomeKind::Reply) {
            CHECK_FALSE(reply_is_exception(obs.reply, "modbus_tcp"));
        }
    }
    CHECK(replies == n);
    CHECK(tracker.events().empty());
}
