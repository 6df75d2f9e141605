#pragma once

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsfuzz/bus.hpp"
#include "icsfuzz/harness.hpp"
#include "icsfuzz/knowledge.hpp"
#include "icsfuzz/mutation_agent.hpp"
#include "icsfuzz/protocol.hpp"

namespace icsfuzz::feedback {

/// Decimal fixed-point, two fractional digits. Severity arithmetic stays in
/// integers so the weighted sum is bit-exact across platforms.
class Score2 {
public:
    constexpr Score2() = default;
    static constexpr Score2 from_raw(int64_t raw) { return Score2(raw); }
    static constexpr Score2 from_int(int64_t v) { return Score2(v * 100); }
    static Score2 from_double(double v);

    constexpr int64_t raw() const { return raw_; }
    double to_double() const { return static_cast<double>(raw_) / 100.0; }

    friend constexpr bool operator==(Score2 a, Score2 b) { return a.raw_ == b.raw_; }
    friend constexpr bool operator<(Score2 a, Score2 b) { return a.raw_ < b.raw_; }

private:
    explicit constexpr Score2(int64_t raw) : raw_(raw) {}
    int64_t raw_ = 0;
};

/// Weighted severity total in 1e-4 units: products of two Score2 values are
/// exact integers here, no rounding anywhere.
class Severity {
public:
    constexpr Severity() = default;
    static constexpr Severity from_raw(int64_t raw) { return Severity(raw); }

    static constexpr Severity weighted_sum(Score2 w1, Score2 e, Score2 w2, Score2 t, Score2 w3,
                                           Score2 r) {
        return Severity(w1.raw() * e.raw() + w2.raw() * t.raw() + w3.raw() * r.raw());
    }

    constexpr int64_t raw() const { return raw_; }
    double to_double() const { return static_cast<double>(raw_) / 10000.0; }

    friend constexpr bool operator==(Severity a, Severity b) { return a.raw_ == b.raw_; }

private:
    explicit constexpr Severity(int64_t raw) : raw_(raw) {}
    int64_t raw_ = 0;
};

struct Weights {
    Score2 w1 = Score2::from_int(1);
    Score2 w2 = Score2::from_int(1);
    Score2 w3 = Score2::from_int(1);
};

/// Anomaly-type and response-time score tables. Crash and timeout anchors are
/// fixed reference values; the rest is configuration.
struct ScoreTables {
    Score2 e_crash = Score2::from_int(10);
    Score2 e_timeout = Score2::from_int(8);
    Score2 e_exception = Score2::from_int(4);
    Score2 e_delay = Score2::from_int(3);
    Score2 e_normal = Score2::from_int(0);
    Score2 t_timeout = Score2::from_int(8);
    Score2 t_delay = Score2::from_int(3);
    Score2 t_nominal = Score2::from_int(0);
    int64_t delay_threshold_ms = 60;
};

enum class ResponseClassKind { Normal, Abnormal, Critical };
std::string to_string(ResponseClassKind kind);
std::optional<ResponseClassKind> class_from(const std::string& s);

struct ResponseClass {
    ResponseClassKind cls = ResponseClassKind::Normal;
    std::string reason;
};

struct SeverityScore {
    Score2 e, t, r;
    Severity s;
    Weights weights;
};

/// Pure classification from observation fields: replies that parse cleanly
/// and arrive promptly are normal; exception codes, malformed replies, and
/// delays are abnormal; timeouts, resets, refusals, and any liveness other
/// than alive are critical.
ResponseClass classify_response(const harness::Observation& obs, const std::string& protocol_id,
                                const ScoreTables& tables = {});

SeverityScore severity(const harness::Observation& obs, const ResponseClass& cls,
                       const Weights& weights, const ScoreTables& tables = {});

/// Maximum attainable severity under the given tables/weights
/// (crash + timeout + saturated resource signal).
Severity max_severity(const Weights& weights, const ScoreTables& tables = {});

struct FuzzyRule {
    double anomaly_high = 0.5;
    double stability_low = 0.5;
    double damping = 0.5;
    size_t window = 200;
};

struct WindowStats {
    double anomaly_fraction = 0.0;
    double stability_fraction = 1.0;
    size_t filled = 0;
};

struct AdjustResult {
    mutation::MutationStrategy strategy;
    bool changed = false;
    bool damped = false;
};

/// Eq.-8 style density update plus field-priority boosting and the fuzzy
/// stability damping pass. Pure: feeds on an explicit window snapshot.
AdjustResult adjust_strategy(const mutation::MutationStrategy& strategy,
                             const SeverityScore& score, Severity s_max,
                             const std::vector<std::string>& implicated_fields,
                             const WindowStats& window, const FuzzyRule& rule,
                             double priority_boost = 2.0, double priority_cap = 8.0);

// ---------------------------------------------------------------------------
// Observation wire schema (response topic)
// ---------------------------------------------------------------------------

bus::BusMessage observation_message(const harness::Observation& obs, const std::string& sender);
std::optional<harness::Observation> observation_from_wire(const nlohmann::json& data);

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

/// Single logical instance per campaign: consumes responses in order, owns
/// the authoritative strategy, publishes updates on "strategy", classifies
/// every observation on a "classified" control event, and appends anomaly
/// records to the knowledge store.
class FeedbackAgent {
public:
    struct Config {
        std::string agent_id = "feedback-0";
        Weights weights;
        ScoreTables tables;
        FuzzyRule fuzzy;
        double priority_boost = 2.0;
        double priority_cap = 8.0;
        std::optional<int64_t> s_max_raw;  // default: max_severity(weights, tables)
        int64_t heartbeat_interval_ms = 5000;
    };

    FeedbackAgent(Config config, bus::Bus& bus, kb::KnowledgeStore* store,
                  mutation::MutationStrategy initial, std::string protocol_id);

    /// One scheduler step: drain case lineage, process pending observations.
    /// Returns the number of observations handled.
    size_t step(int64_t now_ms);

    const mutation::MutationStrategy& strategy() const { return strategy_; }
    uint64_t anomalies_recorded() const { return anomalies_recorded_; }
    uint64_t strategy_updates() const { return strategy_updates_; }
    Severity s_max() const { return s_max_; }

private:
    void note_window(const ResponseClass& cls, const harness::Observation& obs);
    WindowStats window_stats() const;

    Config config_;
    bus::Bus& bus_;
    kb::KnowledgeStore* store_;
    mutation::MutationStrategy strategy_;
    std::string protocol_id_;
    Severity s_max_;
    bus::HeartbeatPacer pacer_;

    std::shared_ptr<bus::Subscription> case_sub_;
    std::shared_ptr<bus::Subscription> response_sub_;

    struct CaseInfo {
        std::vector<std::string> implicated_fields;
        std::string seed_id;
    };
    std::map<std::string, CaseInfo> cases_;
    std::deque<std::pair<bool, bool>> window_;  // (is_anomaly, target_alive)
    uint64_t anomalies_recorded_ = 0;
    uint64_t strategy_updates_ = 0;
};

}  // namespace icsfuzz::feedback
