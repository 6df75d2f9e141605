#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsfuzz/bus.hpp"
#include "icsfuzz/bytes.hpp"
#include "icsfuzz/knowledge.hpp"
#include "icsfuzz/protocol.hpp"
#include "icsfuzz/rng.hpp"
#include "icsfuzz/seed_agent.hpp"

namespace icsfuzz::mutation {

struct MutationStrategy {
    double rho0 = 0.1;  // initial mutation density
    double rho = 0.1;   // working density
    double alpha = 0.5;
    double beta = 1.0;
    double rho_min = 0.01;
    std::map<std::string, double> field_priorities;
    std::map<std::string, double> direction_weights = {
        {"field", 1.0}, {"structural", 1.0}, {"semantic", 1.0}};
    double feedback_score = 0.0;  // normalized severity, [0, 1]

    nlohmann::json wire_data() const;  // strategy topic payload (exact key set)
    void apply_wire(const nlohmann::json& data);
};

/// Working density after a feedback round: rho = rho0 * (1 + alpha * score),
/// clamped to [rho_min, 1].
MutationStrategy update_density(MutationStrategy strategy, double feedback_score);

/// Seeds a strategy's per-field weights from the spec's priority hints.
MutationStrategy strategy_for_spec(const proto::ProtocolSpec& spec, MutationStrategy base = {});

struct MutationRecord {
    std::string kind;  // field | structural | semantic

    // field: V' = (V + dV) mod 2^width
    std::string field;
    uint64_t original = 0;
    uint64_t delta = 0;
    uint64_t mutated = 0;
    uint32_t width = 0;

    // structural: emitted field multiset = (P u F_insert) \ F_delete
    std::vector<std::pair<std::string, Bytes>> inserted;  // splice point -> blob
    std::vector<std::string> deleted;

    // semantic: targeted relation group + what changed
    std::string relation;
    std::string description;

    nlohmann::json to_json() const;
};

struct TestCase {
    std::string case_id;
    std::string seed_id;
    std::string protocol_id;
    std::vector<MutationRecord> mutations;
    Bytes bytes;
    MutationStrategy strategy_snapshot;
    bool fallback = false;  // deterministic engine stood in for a dead remote

    bus::BusMessage wire_message(const std::string& sender) const;
};

struct MutateError {
    enum class Kind { NoMutableFields, NoMutableStructure, NoSemanticRelations, NoOperators };
    Kind kind;
    std::string message;
};

// ---------------------------------------------------------------------------
// Operators (deterministic given the rng stream)
// ---------------------------------------------------------------------------

Result<TestCase, MutateError> mutate_field(const seedgen::Seed& seed,
                                           const proto::ProtocolSpec& spec,
                                           const MutationStrategy& strategy, RngStream& rng);

Result<TestCase, MutateError> mutate_structure(const seedgen::Seed& seed,
                                               const proto::ProtocolSpec& spec,
                                               const MutationStrategy& strategy, RngStream& rng);

Result<TestCase, MutateError> mutate_semantic(const seedgen::Seed& seed,
                                              const proto::ProtocolSpec& spec,
                                              const MutationStrategy& strategy, RngStream& rng);

// ---------------------------------------------------------------------------
// Prompting (remote backend)
// ---------------------------------------------------------------------------

struct Prompt {
    std::string text;
    bool context_truncated = false;
};

/// Context block + the three-step task block (field -> structural -> semantic)
/// + the serialized seed. The context is cut at the knowledge-base character
/// budget with an explicit marker, never silently.
Prompt build_prompt(const seedgen::Seed& seed, const proto::ProtocolSpec& spec,
                    const std::string& context, const std::string& task,
                    size_t context_budget);

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class GenerationBackend {
public:
    virtual ~GenerationBackend() = default;
    virtual std::string name() const = 0;
    /// n cases (case_id left empty for the caller to assign) or an
    /// unavailability error.
    virtual Result<std::vector<TestCase>, std::string> generate(const seedgen::Seed& seed,
                                                                const proto::ProtocolSpec& spec,
                                                                const MutationStrategy& strategy,
                                                                size_t n, RngStream& rng) = 0;
};

/// In-tree engine: operator kinds drawn per direction weights.
class DeterministicBackend final : public GenerationBackend {
public:
    std::string name() const override { return "deterministic"; }
    Result<std::vector<TestCase>, MutateError> generate_cases(const seedgen::Seed& seed,
                                                              const proto::ProtocolSpec& spec,
                                                              const MutationStrategy& strategy,
                                                              size_t n, RngStream& rng);
    Result<std::vector<TestCase>, std::string> generate(const seedgen::Seed& seed,
                                                        const proto::ProtocolSpec& spec,
                                                        const MutationStrategy& strategy, size_t n,
                                                        RngStream& rng) override;
};

/// HTTP generation service: POST /generate {prompt, temperature, top_k,
/// top_p, max_tokens} -> {text}. Returned cases are re-validated; anything
/// that fails structural decode is dropped and counted.
class RemoteBackend final : public GenerationBackend {
public:
    struct Config {
        std::string host = "127.0.0.1";
        uint16_t port = 8089;
        std::string path = "/generate";
        int timeout_ms = 1500;
        int retries = 1;
        double temperature = 0.7;
        int top_k = 50;
        double top_p = 0.95;
        int max_tokens = 1024;
        size_t context_budget = 2048;
    };

    RemoteBackend(Config config, const kb::KnowledgeStore* store);
    std::string name() const override { return "remote"; }
    Result<std::vector<TestCase>, std::string> generate(const seedgen::Seed& seed,
                                                        const proto::ProtocolSpec& spec,
                                                        const MutationStrategy& strategy, size_t n,
                                                        RngStream& rng) override;

    uint64_t dropped_invalid() const { return dropped_invalid_; }

private:
    Config config_;
    const kb::KnowledgeStore* store_;
    uint64_t dropped_invalid_ = 0;
};

/// Protocol-blind baseline: uniform random byte blobs on the same harness.
class RandomBytesBackend final : public GenerationBackend {
public:
    std::string name() const override { return "random"; }
    Result<std::vector<TestCase>, std::string> generate(const seedgen::Seed& seed,
                                                        const proto::ProtocolSpec& spec,
                                                        const MutationStrategy& strategy, size_t n,
                                                        RngStream& rng) override;
};

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

/// Consumes seeds and task assignments, generates batches through the
/// configured backend (falling back to the deterministic engine when the
/// remote one is unreachable), and publishes each case on "test_case".
/// Strategy updates apply between batches, never mid-batch.
class MutationAgent {
public:
    struct Config {
        std::string agent_id = "mutation-0";
        int64_t heartbeat_interval_ms = 5000;
    };

    MutationAgent(Config config, bus::Bus& bus,
                  std::map<std::string, const proto::ProtocolSpec*> specs_by_protocol,
                  std::shared_ptr<GenerationBackend> backend, MutationStrategy initial,
                  RngStream rng);

    /// One scheduler step: heartbeat, apply pending strategy/seeds, and run at
    /// most one assigned task. Returns the number of cases published.
    size_t step(int64_t now_ms);

    bool idle() const { return tasks_.empty(); }
    const std::string& id() const { return config_.agent_id; }
    const MutationStrategy& strategy() const { return strategy_; }
    uint64_t fallback_batches() const { return fallback_batches_; }

private:
    struct Task {
        std::string task_id;
        std::string seed_id;
        size_t cases = 0;
    };

    void drain_inputs();

    Config config_;
    bus::Bus& bus_;
    std::map<std::string, const proto::ProtocolSpec*> specs_;
    std::shared_ptr<GenerationBackend> backend_;
    DeterministicBackend deterministic_;
    MutationStrategy strategy_;
    RngStream rng_;
    bus::HeartbeatPacer pacer_;

    std::shared_ptr<bus::Subscription> seed_sub_;
    std::shared_ptr<bus::Subscription> strategy_sub_;
    std::shared_ptr<bus::Subscription> control_sub_;

    std::map<std::string, seedgen::Seed> corpus_;
    std::vector<Task> tasks_;
    uint64_t case_counter_ = 0;
    uint64_t fallback_batches_ = 0;
};

}  // namespace icsfuzz::mutation
