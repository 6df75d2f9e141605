#include "icsfuzz/bus.hpp"

#include <algorithm>

namespace icsfuzz::bus {

using nlohmann::json;

nlohmann::json BusMessage::to_json() const {
    return json{{"topic", topic}, {"event", event},         {"data", data},
                {"sender", sender}, {"seq", seq},           {"sent_at", sent_at_ms}};
}

std::optional<BusMessage> BusMessage::from_json(const nlohmann::json& j) {
    if (!j.is_object()) return std::nullopt;
    BusMessage m;
    try {
        m.topic = j.at("topic").get<std::string>();
        m.event = j.at("event").get<std::string>();
        m.data = j.at("data");
        m.sender = j.at("sender").get<std::string>();
        m.seq = j.value("seq", uint64_t{0});
        m.sent_at_ms = j.value("sent_at", int64_t{0});
    } catch (const json::exception&) {
        return std::nullopt;
    }
    return m;
}

namespace {

void require_exact_keys(const BusMessage& msg, std::initializer_list<const char*> keys) {
    if (!msg.data.is_object()) {
        throw SchemaViolation("topic " + msg.topic + ": data must be an object");
    }
    for (const char* k : keys) {
        if (!msg.data.contains(k)) {
            throw SchemaViolation("topic " + msg.topic + ": missing key '" + k + "'");
        }
    }
    if (msg.data.size() != keys.size()) {
        throw SchemaViolation("topic " + msg.topic + ": unexpected extra keys");
    }
}

}  // namespace

void check_schema(const BusMessage& msg) {
    const auto& topics = declared_topics();
    if (std::find(topics.begin(), topics.end(), msg.topic) == topics.end()) {
        throw SchemaViolation("undeclared topic: " + msg.topic);
    }
    if (msg.sender.empty()) throw SchemaViolation("message without sender");

    if (msg.topic == "seed") {
        if (msg.event != "seed") throw SchemaViolation("seed topic requires event \"seed\"");
        require_exact_keys(msg, {"seed_id", "protocol_id", "fields", "provenance"});
    } else if (msg.topic == "test_case") {
        if (msg.event != "test_case") {
            throw SchemaViolation("test_case topic requires event \"test_case\"");
        }
        require_exact_keys(msg, {"case_id", "seed_id", "protocol_id", "mutations", "hex"});
    } else if (msg.topic == "response") {
        if (msg.event != "response") {
            throw SchemaViolation("response topic requires event \"response\"");
        }
        require_exact_keys(msg, {"case_id", "outcome", "reply_hex", "response_time_ms",
                                 "liveness_after", "resource_signal"});
    } else if (msg.topic == "strategy") {
        if (msg.event != "strategy") {
            throw SchemaViolation("strategy topic requires event \"strategy\"");
        }
        require_exact_keys(msg, {"rho", "field_priorities", "direction_weights", "feedback_score"});
    } else if (msg.topic == "heartbeat") {
        if (msg.event != "heartbeat") {
            throw SchemaViolation("heartbeat topic requires event \"heartbeat\"");
        }
        require_exact_keys(msg, {"agent_id", "status"});
    } else {  // control: event names the action, payload shape is per-action
        if (msg.event.empty()) throw SchemaViolation("control message requires an event");
        if (!msg.data.is_object()) throw SchemaViolation("control data must be an object");
    }
}

// ---------------------------------------------------------------------------
// Subscription
// ---------------------------------------------------------------------------

std::optional<BusMessage> Subscription::poll() {
    std::lock_guard lock(mutex_);
    if (queue_.empty()) return std::nullopt;
    BusMessage m = std::move(queue_.front());
    queue_.pop_front();
    return m;
}

std::optional<BusMessage> Subscription::wait(int64_t timeout_ms) {
    std::unique_lock lock(mutex_);
    if (!cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms),
                      [&] { return !queue_.empty(); })) {
        return std::nullopt;
    }
    BusMessage m = std::move(queue_.front());
    queue_.pop_front();
    return m;
}

size_t Subscription::pending() const {
    std::lock_guard lock(mutex_);
    return queue_.size();
}

void Subscription::push(BusMessage msg) {
    {
        std::lock_guard lock(mutex_);
        queue_.push_back(std::move(msg));
    }
    cv_.notify_one();
}

// ---------------------------------------------------------------------------
// InProcessBus
// ---------------------------------------------------------------------------

InProcessBus::InProcessBus(Clock& clock, size_t buffer_capacity)
    : clock_(clock), capacity_(buffer_capacity) {}

void InProcessBus::publish(BusMessage msg) {
    check_schema(msg);
    std::lock_guard lock(mutex_);
    msg.seq = ++next_seq_[{msg.sender, msg.topic}];
    msg.sent_at_ms = clock_.now_ms();
    ++sent_;
    if (paused_) {
        if (buffer_.size() >= capacity_) {
            buffer_.pop_front();
            ++dropped_;
        }
        buffer_.push_back(std::move(msg));
        return;
    }
    deliver(std::move(msg));
}

void InProcessBus::deliver(BusMessage&& msg) {
    auto it = subs_.find(msg.topic);
    if (it != subs_.end()) {
        auto& list = it->second;
        list.erase(std::remove_if(list.begin(), list.end(),
                                  [](const std::weak_ptr<Subscription>& w) { return w.expired(); }),
                   list.end());
        for (auto& weak : list) {
            if (auto sub = weak.lock()) sub->push(msg);
        }
    }
    ++delivered_;
}

std::shared_ptr<Subscription> InProcessBus::subscribe(const std::string& topic,
                                                      const std::string&) {
    const auto& topics = declared_topics();
    if (std::find(topics.begin(), topics.end(), topic) == topics.end()) {
        throw SchemaViolation("unknown topic: " + topic);
    }
    auto sub = std::shared_ptr<Subscription>(new Subscription());
    std::lock_guard lock(mutex_);
    subs_[topic].push_back(sub);
    return sub;
}

void InProcessBus::pause() {
    std::lock_guard lock(mutex_);
    paused_ = true;
}

void InProcessBus::resume() {
    std::lock_guard lock(mutex_);
    paused_ = false;
    while (!buffer_.empty()) {
        deliver(std::move(buffer_.front()));
        buffer_.pop_front();
    }
}

uint64_t InProcessBus::sent() const {
    std::lock_guard lock(mutex_);
    return sent_;
}
uint64_t InProcessBus::delivered() const {
    std::lock_guard lock(mutex_);
    return delivered_;
}
uint64_t InProcessBus::buffered() const {
    std::lock_guard lock(mutex_);
    return buffer_.size();
}
uint64_t InProcessBus::dropped() const {
    std::lock_guard lock(mutex_);
    return dropped_;
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

std::string to_string(AgentRole role) {
    switch (role) {
        case AgentRole::Seed: return "seed";
        case AgentRole::Mutation: return "mutation";
        case AgentRole::Feedback: return "feedback";
        case AgentRole::Harness: return "harness";
        case AgentRole::Monitor: return "monitor";
    }
    return "mutation";
}

std::optional<AgentRole> role_from(const std::string& s) {
    if (s == "seed") return AgentRole::Seed;
    if (s == "mutation") return AgentRole::Mutation;
    if (s == "feedback") return AgentRole::Feedback;
    if (s == "harness") return AgentRole::Harness;
    if (s == "monitor") return AgentRole::Monitor;
    return std::nullopt;
}

void Registry::register_agent(const std::string& id, AgentRole role, int64_t now_ms) {
    auto& rec = agents_[id];
    rec.agent_id = id;
    rec.role = role;
    rec.last_heartbeat_ms = now_ms;
    rec.status = AgentStatus::Alive;
}

void Registry::heartbeat(const std::string& id, int64_t now_ms) {
    auto it = agents_.find(id);
    if (it == agents_.end()) return;
    it->second.last_heartbeat_ms = now_ms;
    it->second.status = AgentStatus::Alive;
}

std::vector<std::string> Registry::detect_failures(int64_t now_ms, int64_t timeout_ms) {
    std::vector<std::string> newly_failed;
    for (auto& [id, rec] : agents_) {
        if (rec.status == AgentStatus::Failed) continue;
        if (now_ms - rec.last_heartbeat_ms > timeout_ms) {
            rec.status = AgentStatus::Failed;
            newly_failed.push_back(id);
        }
    }
    return newly_failed;
}

RedistributionOutcome Registry::redistribute(const std::string& failed_id) {
    RedistributionOutcome out;
    auto it = agents_.find(failed_id);
    if (it == agents_.end()) return out;
    AgentRecord& failed = it->second;

    std::vector<AgentRecord*> candidates;
    for (auto& [id, rec] : agents_) {
        if (id != failed_id && rec.role == failed.role && rec.status == AgentStatus::Alive) {
            candidates.push_back(&rec);
        }
    }

    if (candidates.empty()) {
        for (auto& task : failed.assigned_tasks) {
            parked_[failed.role].push_back(task);
            out.parked.push_back(task);
        }
        failed.assigned_tasks.clear();
        return out;
    }

    for (auto& task : failed.assigned_tasks) {
        AgentRecord* best = candidates[0];
        for (auto* c : candidates) {
            if (c->assigned_tasks.size() < best->assigned_tasks.size() ||
                (c->assigned_tasks.size() == best->assigned_tasks.size() &&
                 c->agent_id < best->agent_id)) {
                best = c;
            }
        }
        best->assigned_tasks.push_back(task);
        out.assignments[task] = best->agent_id;
    }
    failed.assigned_tasks.clear();
    return out;
}

void Registry::assign_task(const std::string& id, const std::string& task) {
    agents_.at(id).assigned_tasks.push_back(task);
}

void Registry::complete_task(const std::string& id, const std::string& task) {
    auto it = agents_.find(id);
    if (it == agents_.end()) return;
    auto& tasks = it->second.assigned_tasks;
    tasks.erase(std::remove(tasks.begin(), tasks.end(), task), tasks.end());
}

std::vector<std::string> Registry::claim_parked(AgentRole role) {
    auto it = parked_.find(role);
    if (it == parked_.end()) return {};
    std::vector<std::string> out = std::move(it->second);
    it->second.clear();
    return out;
}

const AgentRecord* Registry::find(const std::string& id) const {
    auto it = agents_.find(id);
    return it == agents_.end() ? nullptr : &it->second;
}

std::vector<AgentRecord> Registry::agents() const {
    std::vector<AgentRecord> out;
    for (const auto& [id, rec] : agents_) out.push_back(rec);
    return out;
}

const std::vector<std::string>& Registry::parked(AgentRole role) const {
    static const std::vector<std::string> empty;
    auto it = parked_.find(role);
    return it == parked_.end() ? empty : it->second;
}

// ---------------------------------------------------------------------------
// Heartbeats
// ---------------------------------------------------------------------------

BusMessage make_heartbeat(const std::string& agent_id) {
    BusMessage m;
    m.topic = "heartbeat";
    m.event = "heartbeat";
    m.sender = agent_id;
    m.data = json{{"agent_id", agent_id}, {"status", "alive"}};
    return m;
}

void heartbeat_loop(Bus& bus, const std::string& agent_id, int64_t interval_ms, Clock& clock,
                    const bool* stop) {
    while (!*stop) {
        bus.publish(make_heartbeat(agent_id));
        clock.sleep_ms(interval_ms);
    }
}

}  // namespace icsfuzz::bus
