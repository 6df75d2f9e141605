#include "icsfuzz/feedback_agent.hpp"

#include <algorithm>
#include <cmath>

namespace icsfuzz::feedback {

using nlohmann::json;

Score2 Score2::from_double(double v) {
    return Score2(static_cast<int64_t>(std::llround(v * 100.0)));
}

std::string to_string(ResponseClassKind kind) {
    switch (kind) {
        case ResponseClassKind::Normal: return "normal";
        case ResponseClassKind::Abnormal: return "abnormal";
        case ResponseClassKind::Critical: return "critical";
    }
    return "normal";
}

std::optional<ResponseClassKind> class_from(const std::string& s) {
    if (s == "normal") return ResponseClassKind::Normal;
    if (s == "abnormal") return ResponseClassKind::Abnormal;
    if (s == "critical") return ResponseClassKind::Critical;
    return std::nullopt;
}

ResponseClass classify_response(const harness::Observation& obs, const std::string& protocol_id,
                                const ScoreTables& tables) {
    using harness::Liveness;
    using harness::OutcomeKind;

    if (obs.outcome == OutcomeKind::Timeout) {
        return {ResponseClassKind::Critical,
                obs.liveness_after == Liveness::Down ? "crash" : "timeout"};
    }
    if (obs.outcome == OutcomeKind::ConnectionReset) {
        return {ResponseClassKind::Critical,
                obs.liveness_after == Liveness::Down ? "crash" : "connection reset"};
    }
    if (obs.outcome == OutcomeKind::ConnectionRefused) {
        return {ResponseClassKind::Critical,
                obs.liveness_after == Liveness::Down ? "crash" : "connection refused"};
    }
    if (obs.liveness_after != Liveness::Alive) {
        return {ResponseClassKind::Critical,
                obs.liveness_after == Liveness::Down ? "crash" : "target degraded after case"};
    }
    if (!harness::reply_well_formed(obs.reply, protocol_id)) {
        return {ResponseClassKind::Abnormal, "validation failure"};
    }
    if (harness::reply_is_exception(obs.reply, protocol_id)) {
        return {ResponseClassKind::Abnormal, "exception code"};
    }
    if (obs.response_time_ms > tables.delay_threshold_ms) {
        return {ResponseClassKind::Abnormal, "delay"};
    }
    return {ResponseClassKind::Normal, "protocol-compliant reply"};
}

SeverityScore severity(const harness::Observation& obs, const ResponseClass& cls,
                       const Weights& weights, const ScoreTables& tables) {
    using harness::Liveness;
    using harness::OutcomeKind;

    SeverityScore out;
    out.weights = weights;

    if (obs.liveness_after == Liveness::Down) {
        out.e = tables.e_crash;
    } else if (obs.outcome == OutcomeKind::Timeout || obs.outcome == OutcomeKind::ConnectionReset ||
               obs.outcome == OutcomeKind::ConnectionRefused) {
        out.e = tables.e_timeout;
    } else if (cls.cls == ResponseClassKind::Abnormal && cls.reason == "delay") {
        out.e = tables.e_delay;
    } else if (cls.cls == ResponseClassKind::Abnormal) {
        out.e = tables.e_exception;
    } else if (cls.cls == ResponseClassKind::Critical) {
        out.e = tables.e_timeout;  // degraded liveness without an outage
    } else {
        out.e = tables.e_normal;
    }

    if (obs.outcome == OutcomeKind::Timeout) {
        out.t = tables.t_timeout;
    } else if (obs.outcome == OutcomeKind::Reply &&
               obs.response_time_ms > tables.delay_threshold_ms) {
        out.t = tables.t_delay;
    } else {
        out.t = tables.t_nominal;
    }

    double clamped = std::clamp(obs.resource_signal, 0.0, 10.0);
    out.r = Score2::from_double(clamped);

    out.s = Severity::weighted_sum(weights.w1, out.e, weights.w2, out.t, weights.w3, out.r);
    return out;
}

Severity max_severity(const Weights& weights, const ScoreTables& tables) {
    return Severity::weighted_sum(weights.w1, tables.e_crash, weights.w2, tables.t_timeout,
                                  weights.w3, Score2::from_int(10));
}

AdjustResult adjust_strategy(const mutation::MutationStrategy& strategy,
                             const SeverityScore& score, Severity s_max,
                             const std::vector<std::string>& implicated_fields,
                             const WindowStats& window, const FuzzyRule& rule,
                             double priority_boost, double priority_cap) {
    AdjustResult out;
    out.strategy = strategy;

    double normalized =
        s_max.raw() > 0 ? static_cast<double>(score.s.raw()) / static_cast<double>(s_max.raw())
                        : 0.0;
    out.strategy.feedback_score = std::clamp(normalized, 0.0, 1.0);
    out.strategy.rho =
        std::clamp(strategy.rho0 * (1.0 + strategy.beta * out.strategy.feedback_score),
                   strategy.rho_min, 1.0);

    for (const auto& field : implicated_fields) {
        auto it = out.strategy.field_priorities.find(field);
        if (it == out.strategy.field_priorities.end()) continue;
        it->second = std::min(it->second * priority_boost, priority_cap);
    }

    // Fuzzy pass: frequent anomalies on a shaky target mean back off, whatever
    // the severity said. Stability overrides aggressiveness.
    if (window.anomaly_fraction > rule.anomaly_high &&
        window.stability_fraction < rule.stability_low) {
        out.strategy.rho = std::clamp(out.strategy.rho * rule.damping, out.strategy.rho_min, 1.0);
        out.damped = true;
    }

    out.changed = out.strategy.rho != strategy.rho ||
                  out.strategy.feedback_score != strategy.feedback_score ||
                  out.strategy.field_priorities != strategy.field_priorities;
    return out;
}

// ---------------------------------------------------------------------------
// Observation wire schema
// ---------------------------------------------------------------------------

bus::BusMessage observation_message(const harness::Observation& obs, const std::string& sender) {
    bus::BusMessage msg;
    msg.topic = "response";
    msg.event = "response";
    msg.sender = sender;
    msg.data = json{{"case_id", obs.case_id},
                    {"outcome", harness::to_string(obs.outcome)},
                    {"reply_hex", to_hex(obs.reply)},
                    {"response_time_ms", obs.response_time_ms},
                    {"liveness_after", harness::to_string(obs.liveness_after)},
                    {"resource_signal", obs.resource_signal}};
    return msg;
}

std::optional<harness::Observation> observation_from_wire(const nlohmann::json& data) {
    harness::Observation obs;
    try {
        obs.case_id = data.at("case_id").get<std::string>();
        auto outcome = harness::outcome_from(data.at("outcome").get<std::string>());
        auto liveness = harness::liveness_from(data.at("liveness_after").get<std::string>());
        if (!outcome || !liveness) return std::nullopt;
        obs.outcome = *outcome;
        obs.liveness_after = *liveness;
        auto reply = from_hex(data.at("reply_hex").get<std::string>());
        if (!reply) return std::nullopt;
        obs.reply = std::move(*reply);
        obs.response_time_ms = data.at("response_time_ms").get<int64_t>();
        obs.resource_signal = data.at("resource_signal").get<double>();
    } catch (const json::exception&) {
        return std::nullopt;
    }
    return obs;
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

FeedbackAgent::FeedbackAgent(Config config, bus::Bus& bus, kb::KnowledgeStore* store,
                             mutation::MutationStrategy initial, std::string protocol_id)
    : config_(std::move(config)),
      bus_(bus),
      store_(store),
      strategy_(std::move(initial)),
      protocol_id_(std::move(protocol_id)),
      pacer_(config_.agent_id, config_.heartbeat_interval_ms) {
    s_max_ = config_.s_max_raw ? Severity::from_raw(*config_.s_max_raw)
                               : max_severity(config_.weights, config_.tables);
    case_sub_ = bus_.subscribe("test_case", config_.agent_id);
    response_sub_ = bus_.subscribe("response", config_.agent_id);
}

void FeedbackAgent::note_window(const ResponseClass& cls, const harness::Observation& obs) {
    bool anomaly = cls.cls != ResponseClassKind::Normal;
    bool alive = obs.liveness_after == harness::Liveness::Alive;
    window_.push_back({anomaly, alive});
    while (window_.size() > config_.fuzzy.window) window_.pop_front();
}

WindowStats FeedbackAgent::window_stats() const {
    WindowStats stats;
    stats.filled = window_.size();
    if (window_.empty()) return stats;
    size_t anomalies = 0, alive = 0;
    for (const auto& [a, l] : window_) {
        anomalies += a ? 1 : 0;
        alive += l ? 1 : 0;
    }
    stats.anomaly_fraction = static_cast<double>(anomalies) / window_.size();
    stats.stability_fraction = static_cast<double>(alive) / window_.size();
    return stats;
}

size_t FeedbackAgent::step(int64_t now_ms) {
    pacer_.maybe_beat(bus_, now_ms);

    while (auto msg = case_sub_->poll()) {
        CaseInfo info;
        info.seed_id = msg->data.value("seed_id", "");
        for (const auto& rec : msg->data.value("mutations", json::array())) {
            std::string kind = rec.value("kind", "");
            if (kind == "field") {
                info.implicated_fields.push_back(rec.value("field", ""));
            } else if (kind == "semantic") {
                info.implicated_fields.push_back(rec.value("relation", ""));
            } else if (kind == "structural") {
                for (const auto& name : rec.value("deleted", std::vector<std::string>{})) {
                    info.implicated_fields.push_back(name);
                }
            }
        }
        cases_[msg->data.value("case_id", "")] = std::move(info);
    }

    size_t handled = 0;
    while (auto msg = response_sub_->poll()) {
        auto obs = observation_from_wire(msg->data);
        if (!obs) continue;
        ++handled;

        ResponseClass cls = classify_response(*obs, protocol_id_, config_.tables);
        SeverityScore score = severity(*obs, cls, config_.weights, config_.tables);
        note_window(cls, *obs);

        std::vector<std::string> implicated;
        auto case_it = cases_.find(obs->case_id);
        if (case_it != cases_.end() && cls.cls != ResponseClassKind::Normal) {
            implicated = case_it->second.implicated_fields;
        }

        auto adjusted = adjust_strategy(strategy_, score, s_max_, implicated, window_stats(),
                                        config_.fuzzy, config_.priority_boost,
                                        config_.priority_cap);
        if (adjusted.changed) {
            strategy_ = adjusted.strategy;
            bus::BusMessage update;
            update.topic = "strategy";
            update.event = "strategy";
            update.sender = config_.agent_id;
            update.data = strategy_.wire_data();
            bus_.publish(update);
            ++strategy_updates_;
        }

        bus::BusMessage classified;
        classified.topic = "control";
        classified.event = "classified";
        classified.sender = config_.agent_id;
        classified.data = json{{"case_id", obs->case_id},
                               {"class", to_string(cls.cls)},
                               {"reason", cls.reason},
                               {"severity", score.s.to_double()},
                               {"feedback_score", strategy_.feedback_score}};
        bus_.publish(classified);

        if (store_ && cls.cls != ResponseClassKind::Normal) {
            kb::RuleEntry entry;
            entry.id = "anom-" + obs->case_id + "-" + std::to_string(anomalies_recorded_);
            entry.protocol_id = protocol_id_;
            entry.kind = kb::RuleKind::AnomalyRecord;
            entry.title = to_string(cls.cls) + " response: " + cls.reason;
            entry.body = "case " + obs->case_id + " drew " + to_string(cls.cls) + " (" +
                         cls.reason + "), severity " + std::to_string(score.s.to_double());
            entry.keywords = {to_string(cls.cls), cls.reason, protocol_id_};
            for (const auto& f : implicated) {
                if (!f.empty()) entry.keywords.push_back(f);
            }
            entry.source = "feedback-agent";
            try {
                store_->append(entry);
                ++anomalies_recorded_;
            } catch (const kb::StoreError&) {
                // duplicate ids cannot happen with the counter suffix; io
                // errors surface through the campaign's store handling
            }
        }
    }
    return handled;
}

}  // namespace icsfuzz::feedback
