#pragma once

#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsfuzz/clock.hpp"

namespace icsfuzz::bus {

inline const std::vector<std::string>& declared_topics() {
    static const std::vector<std::string> topics{"seed",     "test_case", "response",
                                                 "strategy", "heartbeat", "control"};
    return topics;
}

struct BusMessage {
    std::string topic;
    std::string event;
    nlohmann::json data;
    std::string sender;
    uint64_t seq = 0;        // per-sender monotonic, assigned on publish
    int64_t sent_at_ms = 0;  // assigned on publish

    nlohmann::json to_json() const;
    static std::optional<BusMessage> from_json(const nlohmann::json& j);
};

class SchemaViolation : public std::runtime_error {
public:
    explicit SchemaViolation(const std::string& msg) : std::runtime_error(msg) {}
};

/// Validates topic membership plus the exact data key set of each typed topic.
/// Throws SchemaViolation.
void check_schema(const BusMessage& msg);

/// Consumer handle: an ordered queue fed by the transport.
class Subscription {
public:
    std::optional<BusMessage> poll();
    std::optional<BusMessage> wait(int64_t timeout_ms);
    size_t pending() const;

private:
    friend class InProcessBus;
    friend class TcpBusClient;
    void push(BusMessage msg);

    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<BusMessage> queue_;
};

class Bus {
public:
    virtual ~Bus() = default;

    /// Non-blocking fan-out to current subscribers of the topic. Assigns the
    /// per-sender sequence number and timestamp. Throws SchemaViolation for
    /// malformed messages; transport trouble is absorbed by buffering.
    virtual void publish(BusMessage msg) = 0;

    virtual std::shared_ptr<Subscription> subscribe(const std::string& topic,
                                                    const std::string& agent_id) = 0;

    virtual uint64_t sent() const = 0;
    virtual uint64_t delivered() const = 0;
    virtual uint64_t buffered() const = 0;
    virtual uint64_t dropped() const = 0;
};

/// Deterministic transport for single-process campaigns and tests. pause()
/// simulates the transport going down: messages buffer up to capacity with
/// oldest-dropped accounting, and resume() flushes in publish order.
class InProcessBus final : public Bus {
public:
    explicit InProcessBus(Clock& clock = SystemClock::instance(), size_t buffer_capacity = 1024);

    void publish(BusMessage msg) override;
    std::shared_ptr<Subscription> subscribe(const std::string& topic,
                                            const std::string& agent_id) override;

    void pause();
    void resume();

    uint64_t sent() const override;
    uint64_t delivered() const override;
    uint64_t buffered() const override;
    uint64_t dropped() const override;

private:
    void deliver(BusMessage&& msg);

    Clock& clock_;
    size_t capacity_;
    mutable std::mutex mutex_;
    bool paused_ = false;
    std::deque<BusMessage> buffer_;
    std::map<std::string, std::vector<std::weak_ptr<Subscription>>> subs_;
    std::map<std::pair<std::string, std::string>, uint64_t> next_seq_;
    uint64_t sent_ = 0, delivered_ = 0, dropped_ = 0;
};

// ---------------------------------------------------------------------------
// Agent registry: heartbeats, failure detection, task redistribution
// ---------------------------------------------------------------------------

enum class AgentRole { Seed, Mutation, Feedback, Harness, Monitor };
std::string to_string(AgentRole role);
std::optional<AgentRole> role_from(const std::string& s);

enum class AgentStatus { Alive, Failed };

struct AgentRecord {
    std::string agent_id;
    AgentRole role = AgentRole::Mutation;
    int64_t last_heartbeat_ms = 0;
    std::vector<std::string> assigned_tasks;
    AgentStatus status = AgentStatus::Alive;
};

struct RedistributionOutcome {
    std::map<std::string, std::string> assignments;  // task -> surviving agent
    std::vector<std::string> parked;                 // no candidate: retried later
};

/// Registry state machine. Pure bookkeeping (no IO); the campaign monitor owns
/// one instance and serializes access.
class Registry {
public:
    void register_agent(const std::string& id, AgentRole role, int64_t now_ms);

    /// Updates last_heartbeat; an agent previously marked failed re-registers
    /// as alive (parked work becomes assignable again).
    void heartbeat(const std::string& id, int64_t now_ms);

    /// Marks agents whose heartbeat is older than timeout as failed and
    /// returns the ids that newly transitioned (idempotent re-scans return
    /// nothing for already-failed agents).
    std::vector<std::string> detect_failures(int64_t now_ms, int64_t timeout_ms);

    /// Least-loaded-first reassignment of a failed agent's tasks to alive
    /// agents of the same role, ties broken by lexicographic agent id. Tasks
    /// with no candidate are parked for the next alive registration.
    RedistributionOutcome redistribute(const std::string& failed_id);

    void assign_task(const std::string& id, const std::string& task);
    void complete_task(const std::string& id, const std::string& task);

    /// Parked tasks claimable by an alive agent of the given role.
    std::vector<std::string> claim_parked(AgentRole role);

    const AgentRecord* find(const std::string& id) const;
    std::vector<AgentRecord> agents() const;
    const std::vector<std::string>& parked(AgentRole role) const;

private:
    std::map<std::string, AgentRecord> agents_;
    std::map<AgentRole, std::vector<std::string>> parked_;
};

/// Builds the Alg-2 style heartbeat message ({"agent_id", "status":"alive"}).
BusMessage make_heartbeat(const std::string& agent_id);

/// Emits a heartbeat every interval until *stop becomes true. Threaded agents
/// run this loop; stepped agents call maybe_heartbeat instead.
void heartbeat_loop(Bus& bus, const std::string& agent_id, int64_t interval_ms, Clock& clock,
                    const bool* stop);

/// Heartbeat helper for cooperatively-stepped agents.
class HeartbeatPacer {
public:
    HeartbeatPacer(std::string agent_id, int64_t interval_ms)
        : agent_id_(std::move(agent_id)), interval_ms_(interval_ms) {}

    void maybe_beat(Bus& bus, int64_t now_ms) {
        if (last_ms_ >= 0 && now_ms - last_ms_ < interval_ms_) return;
        bus.publish(make_heartbeat(agent_id_));
        last_ms_ = now_ms;
    }

private:
    std::string agent_id_;
    int64_t interval_ms_;
    int64_t last_ms_ = -1;
};

}  // namespace icsfuzz::bus
