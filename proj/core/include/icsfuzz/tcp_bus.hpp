#pragma once

#include <atomic>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "icsfuzz/bus.hpp"

namespace icsfuzz::bus {

/// Port plan: seeds, test cases, and a shared port where responses, strategy
/// updates, heartbeats, and control messages are multiplexed by topic field.
struct BusPorts {
    uint16_t seed = 5555;
    uint16_t test_case = 5556;
    uint16_t other = 5557;
};

/// Which of the three ports carries a topic.
int topic_port_index(const std::string& topic);

/// Message broker for the TCP transport. Wire format: 4-byte big-endian
/// length prefix + UTF-8 JSON document; clients send {"op":"sub"|"pub", ...}
/// envelopes. Forwarding is serialized, preserving per-sender order.
class BusBroker {
public:
    explicit BusBroker(BusPorts ports = {}, std::string bind_addr = "127.0.0.1");
    ~BusBroker();

    /// Binds all three ports. False when a port is already taken.
    bool start();
    void stop();
    bool running() const { return running_.load(); }
    const BusPorts& ports() const { return ports_; }

private:
    struct Conn;
    void io_loop();

    BusPorts ports_;
    std::string bind_addr_;
    std::atomic<bool> running_{false};
    std::atomic<bool> stop_{false};
    std::thread io_thread_;
    std::vector<int> listen_fds_;
    std::vector<std::unique_ptr<Conn>> conns_;
};

/// Bus implementation over the broker. Publishes buffer while the link is
/// down (bounded, oldest dropped and counted) and flush after reconnecting;
/// subscriptions re-register automatically.
class TcpBusClient final : public Bus {
public:
    struct Config {
        std::string host = "127.0.0.1";
        BusPorts ports;
        size_t buffer_capacity = 1000;
        int reconnect_initial_ms = 40;
        int reconnect_max_ms = 640;  // exponential backoff cap
        int connect_timeout_ms = 250;
    };

    explicit TcpBusClient(Config config, const std::string& client_id);
    ~TcpBusClient();

    void publish(BusMessage msg) override;
    std::shared_ptr<Subscription> subscribe(const std::string& topic,
                                            const std::string& agent_id) override;

    uint64_t sent() const override;
    uint64_t delivered() const override;
    uint64_t buffered() const override;
    uint64_t dropped() const override;

    bool connected(int port_index) const;
    void stop();

private:
    struct PortLink;
    void maintenance_loop();
    void reader_loop(int port_index);
    void route_incoming(const BusMessage& msg);

    Config config_;
    std::string client_id_;
    std::atomic<bool> stop_{false};
    std::thread maintenance_;

    mutable std::mutex mutex_;
    std::vector<std::unique_ptr<PortLink>> links_;
    std::map<std::string, std::vector<std::weak_ptr<Subscription>>> subs_;
    std::map<std::pair<std::string, std::string>, uint64_t> next_seq_;
    uint64_t sent_ = 0, delivered_ = 0, dropped_ = 0;
};

}  // namespace icsfuzz::bus
