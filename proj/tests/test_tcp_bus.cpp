#include <thread>

#include "doctest.h"
#include "icsfuzz/tcp_bus.hpp"

using namespace icsfuzz;
using namespace icsfuzz::bus;
using nlohmann::json;

namespace {

// Each test gets its own port block to avoid lingering sockets interfering.
BusPorts test_ports(uint16_t base) { return BusPorts{base, uint16_t(base + 1), uint16_t(base + 2)}; }

BusMessage control(const std::string& sender, const std::string& event) {
    BusMessage m;
    m.topic = "control";
    m.event = event;
    m.sender = sender;
    m.data = json::object();
    return m;
}

bool wait_until(const std::function<bool()>& pred, int timeout_ms) {
    for (int waited = 0; waited < timeout_ms; waited += 10) {
        if (pred()) return true;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    return pred();
}

}  // namespace

TEST_CASE("tcp bus: pub/sub across two clients") {
    auto ports = test_ports(25555);
    BusBroker broker(ports);
    REQUIRE(broker.start());

    TcpBusClient::Config cfg;
    cfg.ports = ports;
    TcpBusClient producer(cfg, "producer");
    TcpBusClient consumer(cfg, "consumer");

    auto sub = consumer.subscribe("control", "consumer");
    REQUIRE(wait_until([&] { return consumer.connected(2); }, 2000));
    std::this_thread::sleep_for(std::chrono::milliseconds(50));  // sub registration

    for (int i = 0; i < 20; ++i) producer.publish(control("producer", "e" + std::to_string(i)));

    REQUIRE(wait_until([&] { return sub->pending() == 20; }, 3000));
    uint64_t last_seq = 0;
    for (int i = 0; i < 20; ++i) {
        auto m = sub->poll();
        REQUIRE(m);
        CHECK(m->event == "e" + std::to_string(i));
        CHECK(m->seq == last_seq + 1);
        last_seq = m->seq;
    }

    producer.stop();
    consumer.stop();
    broker.stop();
}

TEST_CASE("tcp bus: port already in use is reported") {
    auto ports = test_ports(25655);
    BusBroker first(ports);
    REQUIRE(first.start());
    BusBroker second(ports);
    CHECK_FALSE(second.start());
    first.stop();
}

TEST_CASE("tcp bus: messages buffer while the broker is down and flush after restart") {
    auto ports = test_ports(25755);
    auto broker = std::make_unique<BusBroker>(ports);
    REQUIRE(broker->start());

    TcpBusClient::Config cfg;
    cfg.ports = ports;
    TcpBusClient producer(cfg, "producer");
    TcpBusClient consumer(cfg, "consumer");
    auto sub = consumer.subscribe("control", "consumer");
    REQUIRE(wait_until([&] { return consumer.connected(2); }, 2000));
    std::this_thread::sleep_for(std::chrono::milliseconds(50));

    producer.publish(control("producer", "before"));
    REQUIRE(wait_until([&] { return sub->pending() == 1; }, 3000));

    // kill the transport mid-run
    broker->stop();
    broker.reset();
    REQUIRE(wait_until(
        [&] {
            producer.publish(control("producer", "probe"));
            return producer.buffered() > 0;
        },
        3000));

    for (int i = 0; i < 5; ++i) producer.publish(control("producer", "while_down"));
    CHECK(producer.buffered() >= 5);

    // restart and verify the buffered messages arrive after reconnect
    broker = std::make_unique<BusBroker>(ports);
    REQUIRE(broker->start());
    REQUIRE(wait_until([&] { return producer.buffered() == 0; }, 5000));
    REQUIRE(wait_until([&] { return consumer.connected(2); }, 5000));

    producer.publish(control("producer", "after"));
    REQUIRE(wait_until(
        [&] {
            while (auto m = sub->poll()) {
                if (m->event == "after") return true;
            }
            return false;
        },
        5000));

    producer.stop();
    consumer.stop();
    broker->stop();
}
