#include "doctest.h"
#include "icsfuzz/feedback_agent.hpp"
#include "support/fixtures.hpp"

using namespace icsfuzz;
using namespace icsfuzz::feedback;
using harness::Liveness;
using harness::Observation;
using harness::OutcomeKind;
using nlohmann::json;
using testsupport::fixture_path;

namespace {

Observation reply_obs(const std::string& reply_hex, int64_t ms = 2,
                      Liveness live = Liveness::Alive) {
    Observation obs;
    obs.case_id = "c1";
    obs.outcome = OutcomeKind::Reply;
    obs.reply = *from_hex(reply_hex);
    obs.response_time_ms = ms;
    obs.liveness_after = live;
    return obs;
}

Observation outcome_obs(OutcomeKind kind, Liveness live) {
    Observation obs;
    obs.case_id = "c1";
    obs.outcome = kind;
    obs.response_time_ms = kind == OutcomeKind::Timeout ? 120 : 3;
    obs.liveness_after = live;
    return obs;
}

}  // namespace

TEST_CASE("classification: exception reply is abnormal with the exception reason") {
    auto cls = classify_response(reply_obs("000100000003018304"), "modbus_tcp");
    CHECK(cls.cls == ResponseClassKind::Abnormal);
    CHECK(cls.reason == "exception code");
}

TEST_CASE("classification: timeout with the target down is a crash") {
    auto cls = classify_response(outcome_obs(OutcomeKind::Timeout, Liveness::Down), "modbus_tcp");
    CHECK(cls.cls == ResponseClassKind::Critical);
    CHECK(cls.reason == "crash");
}

TEST_CASE("classification: prompt valid echo is normal") {
    auto cls = classify_response(reply_obs("000100000005010302abcd"), "modbus_tcp");
    CHECK(cls.cls == ResponseClassKind::Normal);
}

TEST_CASE("classification: slow reply is abnormal, malformed reply is abnormal") {
    auto slow = classify_response(reply_obs("000100000005010302abcd", 200), "modbus_tcp");
    CHECK(slow.cls == ResponseClassKind::Abnormal);
    CHECK(slow.reason == "delay");

    auto bad = classify_response(reply_obs("0001990000050103", 2), "modbus_tcp");
    CHECK(bad.cls == ResponseClassKind::Abnormal);
    CHECK(bad.reason == "validation failure");
}

TEST_CASE("classification: totality and determinism over the outcome space") {
    for (auto outcome : {OutcomeKind::Reply, OutcomeKind::Timeout, OutcomeKind::ConnectionReset,
                         OutcomeKind::ConnectionRefused}) {
        for (auto live : {Liveness::Alive, Liveness::Degraded, Liveness::Down}) {
            Observation obs = outcome_obs(outcome, live);
            if (outcome == OutcomeKind::Reply) obs.reply = *from_hex("000100000005010302abcd");
            auto a = classify_response(obs, "modbus_tcp");
            auto b = classify_response(obs, "modbus_tcp");
            CHECK(a.cls == b.cls);
            CHECK(a.reason == b.reason);
            if (outcome != OutcomeKind::Reply || live != Liveness::Alive) {
                CHECK(a.cls == ResponseClassKind::Critical);
            }
        }
    }
}

TEST_CASE("severity: reference substitutions") {
    Weights unit;  // (1,1,1)

    // crash: E=10, T=8 (timeout path), R=0 -> S=18
    auto crash = severity(outcome_obs(OutcomeKind::Timeout, Liveness::Down),
                          {ResponseClassKind::Critical, "crash"}, unit);
    CHECK(crash.e == Score2::from_int(10));
    CHECK(crash.t == Score2::from_int(8));
    CHECK(crash.s.to_double() == doctest::Approx(18.0));

    // normal: all zero
    auto normal = severity(reply_obs("000100000005010302abcd"),
                           {ResponseClassKind::Normal, ""}, unit);
    CHECK(normal.s.raw() == 0);

    // weights (2,1,0) with E=4, T=3, R=7 -> S=11
    Observation slow = reply_obs("000100000003018304", 90);
    slow.resource_signal = 7.0;
    Weights w{Score2::from_int(2), Score2::from_int(1), Score2::from_int(0)};
    auto s = severity(slow, {ResponseClassKind::Abnormal, "exception code"}, w);
    CHECK(s.e == Score2::from_int(4));
    CHECK(s.t == Score2::from_int(3));
    CHECK(s.r == Score2::from_int(7));
    CHECK(s.s.to_double() == doctest::Approx(11.0));
}

TEST_CASE("severity: Eq-7 bit-exactness over randomized fixed-point tuples") {
    RngStream rng(123456);
    for (int i = 0; i < 1000; ++i) {
        Weights w{Score2::from_raw(static_cast<int64_t>(rng.below(1000))),
                  Score2::from_raw(static_cast<int64_t>(rng.below(1000))),
                  Score2::from_raw(static_cast<int64_t>(rng.below(1000)))};
        Score2 e = Score2::from_raw(static_cast<int64_t>(rng.below(2000)));
        Score2 t = Score2::from_raw(static_cast<int64_t>(rng.below(2000)));
        Score2 r = Score2::from_raw(static_cast<int64_t>(rng.below(1001)));
        Severity s = Severity::weighted_sum(w.w1, e, w.w2, t, w.w3, r);
        // S - (w1*E + w2*T + w3*R) must be exactly zero in raw units
        int64_t expected = w.w1.raw() * e.raw() + w.w2.raw() * t.raw() + w.w3.raw() * r.raw();
        CHECK(s.raw() - expected == 0);
    }
}

TEST_CASE("adjust_strategy: Eq-8 substitution and identity") {
    mutation::MutationStrategy strategy;
    strategy.rho0 = 0.1;
    strategy.beta = 1.0;
    strategy.field_priorities = {{"length", 1.0}};

    SeverityScore max_score;
    max_score.s = Severity::from_raw(180000);  // == s_max below
    auto r = adjust_strategy(strategy, max_score, Severity::from_raw(180000), {}, {}, {});
    CHECK(r.strategy.rho == doctest::Approx(0.2));  // rho0 * (1 + beta * 1)
    CHECK(r.changed);

    SeverityScore zero;
    zero.s = Severity::from_raw(0);
    auto rz = adjust_strategy(strategy, zero, Severity::from_raw(180000), {}, {}, {});
    CHECK(rz.strategy.rho == doctest::Approx(0.1));  // identity
    CHECK(rz.strategy.field_priorities.at("length") == doctest::Approx(1.0));
}

TEST_CASE("adjust_strategy: monotone in severity before the fuzzy pass") {
    mutation::MutationStrategy strategy;
    strategy.rho0 = 0.1;
    strategy.beta = 1.0;
    Severity s_max = Severity::from_raw(180000);
    double last = 0.0;
    for (int64_t raw = 0; raw <= 180000; raw += 9000) {
        SeverityScore sc;
        sc.s = Severity::from_raw(raw);
        auto r = adjust_strategy(strategy, sc, s_max, {}, {}, {});
        CHECK(r.strategy.rho >= last);
        last = r.strategy.rho;
    }
}

TEST_CASE("adjust_strategy: fuzzy damping halves rho when the target is shaky") {
    mutation::MutationStrategy strategy;
    strategy.rho0 = 0.1;
    strategy.beta = 1.0;

    SeverityScore max_score;
    max_score.s = Severity::from_raw(180000);
    WindowStats shaky{0.9, 0.2, 200};
    auto r = adjust_strategy(strategy, max_score, Severity::from_raw(180000), {}, shaky, {});
    CHECK(r.damped);
    CHECK(r.strategy.rho == doctest::Approx(0.1));  // 0.2 then halved

    // stability above the low threshold: no damping
    WindowStats stable{0.9, 0.9, 200};
    auto r2 = adjust_strategy(strategy, max_score, Severity::from_raw(180000), {}, stable, {});
    CHECK_FALSE(r2.damped);
    CHECK(r2.strategy.rho == doctest::Approx(0.2));
}

TEST_CASE("adjust_strategy: implicated fields get boosted with a cap") {
    mutation::MutationStrategy strategy;
    strategy.field_priorities = {{"byte_count", 1.0}, {"unit", 1.0}};
    SeverityScore sc;
    sc.s = Severity::from_raw(90000);
    auto r = adjust_strategy(strategy, sc, Severity::from_raw(180000), {"byte_count"}, {}, {});
    CHECK(r.strategy.field_priorities.at("byte_count") == doctest::Approx(2.0));
    CHECK(r.strategy.field_priorities.at("unit") == doctest::Approx(1.0));

    // repeated boosts saturate at the cap
    auto current = r.strategy;
    for (int i = 0; i < 10; ++i) {
        current = adjust_strategy(current, sc, Severity::from_raw(180000), {"byte_count"}, {}, {})
                      .strategy;
    }
    CHECK(current.field_priorities.at("byte_count") == doctest::Approx(8.0));
}

TEST_CASE("observation wire round-trip satisfies the response schema") {
    Observation obs = reply_obs("000100000003018304", 42);
    obs.resource_signal = 2.5;
    auto msg = observation_message(obs, "harness-0");
    CHECK_NOTHROW(bus::check_schema(msg));
    auto back = observation_from_wire(msg.data);
    REQUIRE(back.has_value());
    CHECK(back->case_id == obs.case_id);
    CHECK(back->outcome == obs.outcome);
    CHECK(back->reply == obs.reply);
    CHECK(back->resource_signal == doctest::Approx(2.5));
}

TEST_CASE("agent: publishes exactly one strategy message per changing adjustment") {
    VirtualClock clock;
    bus::InProcessBus bus(clock);
    auto strategy_sub = bus.subscribe("strategy", "watch");
    auto control_sub = bus.subscribe("control", "watch");

    mutation::MutationStrategy initial;
    initial.rho0 = 0.1;
    initial.beta = 1.0;
    initial.field_priorities = {{"length", 1.0}};
    FeedbackAgent::Config cfg;
    FeedbackAgent agent(cfg, bus, nullptr, initial, "modbus_tcp");

    // a case whose field mutation touched "length"
    bus::BusMessage case_msg;
    case_msg.topic = "test_case";
    case_msg.event = "test_case";
    case_msg.sender = "mutation-0";
    case_msg.data = json{{"case_id", "c1"},
                         {"seed_id", "s1"},
                         {"protocol_id", "modbus_tcp"},
                         {"mutations", json::array({json{{"kind", "field"},
                                                         {"field", "length"},
                                                         {"v", 10},
                                                         {"dv", 1},
                                                         {"v_prime", 11},
                                                         {"width", 16}}})},
                         {"hex", "00"}};
    bus.publish(case_msg);

    Observation crash = outcome_obs(OutcomeKind::Timeout, Liveness::Down);
    crash.case_id = "c1";
    bus.publish(observation_message(crash, "harness-0"));

    CHECK(agent.step(clock.now_ms()) == 1);
    CHECK(strategy_sub->pending() == 1);  // exactly one strategy publication
    auto update = strategy_sub->poll();
    REQUIRE(update);
    CHECK(update->data.at("rho").get<double>() > 0.1);
    CHECK(update->data.at("field_priorities").at("length").get<double>() ==
          doctest::Approx(2.0));

    bool classified = false;
    while (auto m = control_sub->poll()) {
        if (m->event == "classified" && m->data.value("class", "") == "critical") {
            classified = true;
        }
    }
    CHECK(classified);

    // identical repeated severity with an unchanged strategy publishes nothing
    Observation normal = reply_obs("000100000005010302abcd");
    normal.case_id = "c2";
    bus.publish(observation_message(normal, "harness-0"));
    bus.publish(observation_message(normal, "harness-0"));
    agent.step(clock.now_ms());
    // first normal resets rho toward rho0 (a change), the second is a no-op
    CHECK(strategy_sub->pending() == 1);
}

TEST_CASE("agent: anomalies are appended to the store with case lineage") {
    VirtualClock clock;
    bus::InProcessBus bus(clock);
    kb::KnowledgeStore store;  // in-memory

    mutation::MutationStrategy initial;
    initial.field_priorities = {{"byte_count", 1.0}};
    FeedbackAgent::Config cfg;
    FeedbackAgent agent(cfg, bus, &store, initial, "modbus_tcp");

    bus::BusMessage case_msg;
    case_msg.topic = "test_case";
    case_msg.event = "test_case";
    case_msg.sender = "mutation-0";
    case_msg.data = json{{"case_id", "c9"},
                         {"seed_id", "s1"},
                         {"protocol_id", "modbus_tcp"},
                         {"mutations", json::array({json{{"kind", "semantic"},
                                                         {"relation", "byte_count"},
                                                         {"description", "count skew"}}})},
                         {"hex", "00"}};
    bus.publish(case_msg);

    Observation crash = outcome_obs(OutcomeKind::Timeout, Liveness::Down);
    crash.case_id = "c9";
    bus.publish(observation_message(crash, "harness-0"));
    bus.publish(observation_message(crash, "harness-0"));  // identical anomaly, distinct entry
    agent.step(clock.now_ms());

    CHECK(agent.anomalies_recorded() == 2);
    auto hits = store.retrieve("crash modbus_tcp byte_count", 5);
    REQUIRE_FALSE(hits.empty());
    CHECK(hits[0].entry.kind == kb::RuleKind::AnomalyRecord);

    // normal observations record nothing
    Observation normal = reply_obs("000100000005010302abcd");
    normal.case_id = "c10";
    bus.publish(observation_message(normal, "harness-0"));
    agent.step(clock.now_ms());
    CHECK(agent.anomalies_recorded() == 2);
}
