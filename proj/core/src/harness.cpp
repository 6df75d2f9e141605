#include "icsfuzz/harness.hpp"

#include "net_util.hpp"

namespace icsfuzz::harness {

std::string to_string(OutcomeKind kind) {
    switch (kind) {
        case OutcomeKind::Reply: return "reply";
        case OutcomeKind::Timeout: return "timeout";
        case OutcomeKind::ConnectionReset: return "connection-reset";
        case OutcomeKind::ConnectionRefused: return "connection-refused";
    }
    return "timeout";
}

std::optional<OutcomeKind> outcome_from(const std::string& s) {
    if (s == "reply") return OutcomeKind::Reply;
    if (s == "timeout") return OutcomeKind::Timeout;
    if (s == "connection-reset") return OutcomeKind::ConnectionReset;
    if (s == "connection-refused") return OutcomeKind::ConnectionRefused;
    return std::nullopt;
}

std::string to_string(Liveness state) {
    switch (state) {
        case Liveness::Alive: return "alive";
        case Liveness::Degraded: return "degraded";
        case Liveness::Down: return "down";
    }
    return "down";
}

std::optional<Liveness> liveness_from(const std::string& s) {
    if (s == "alive") return Liveness::Alive;
    if (s == "degraded") return Liveness::Degraded;
    if (s == "down") return Liveness::Down;
    return std::nullopt;
}

bool reply_well_formed(const Bytes& reply, const std::string& protocol_id) {
    if (protocol_id == "modbus_tcp") {
        if (reply.size() < 9) return false;
        uint16_t protocol = static_cast<uint16_t>((reply[2] << 8) | reply[3]);
        uint16_t length = static_cast<uint16_t>((reply[4] << 8) | reply[5]);
        return protocol == 0 && reply.size() == 6u + length;
    }
    return !reply.empty();
}

bool reply_is_exception(const Bytes& reply, const std::string& protocol_id) {
    if (protocol_id == "modbus_tcp") {
        return reply.size() >= 9 && (reply[7] & 0x80) != 0;
    }
    return false;
}

Injector::Injector(TargetEndpoint endpoint, const proto::ProtocolSpec& spec, Clock& clock)
    : endpoint_(std::move(endpoint)), spec_(spec), clock_(clock) {}

Injector::WireReply Injector::exchange(const Bytes& payload) {
    WireReply out{OutcomeKind::ConnectionRefused, {}, 0.0};

    std::optional<net::Socket> sock;
    for (int attempt = 0; attempt <= endpoint_.max_retries && !sock; ++attempt) {
        sock = net::tcp_connect(endpoint_.host, endpoint_.port, endpoint_.connect_timeout_ms);
        if (!sock && attempt < endpoint_.max_retries) {
            clock_.sleep_ms(endpoint_.backoff_base_ms * (1 << attempt));
        }
    }
    if (!sock) return out;  // refused after retries: that is itself signal

    if (!net::send_all(sock->fd(), payload)) {
        out.outcome = OutcomeKind::ConnectionReset;
        return out;
    }

    // Protocol-aware reply framing. Modbus: MBAP header first, then the
    // declared remainder; other protocols read a single burst.
    if (endpoint_.protocol_id == "modbus_tcp") {
        Bytes reply;
        auto st = net::recv_exact(sock->fd(), reply, 6, endpoint_.response_timeout_ms);
        if (st == net::RecvStatus::Closed) {
            out.outcome = reply.empty() ? OutcomeKind::ConnectionReset : OutcomeKind::Timeout;
            out.bytes = std::move(reply);
            return out;
        }
        if (st != net::RecvStatus::Data) {
            out.outcome = OutcomeKind::Timeout;
            out.bytes = std::move(reply);
            return out;
        }
        uint16_t length = static_cast<uint16_t>((reply[4] << 8) | reply[5]);
        size_t rest = std::min<size_t>(length, 300);
        st = net::recv_exact(sock->fd(), reply, rest, endpoint_.response_timeout_ms);
        if (st != net::RecvStatus::Data) {
            out.outcome = OutcomeKind::Timeout;
            out.bytes = std::move(reply);
            return out;
        }
        if (endpoint_.resource_channel) {
            Bytes trailer;
            if (net::recv_exact(sock->fd(), trailer, 4, 15) == net::RecvStatus::Data &&
                trailer[0] == 'R' && trailer[1] == 'S') {
                out.resource_signal = ((trailer[2] << 8) | trailer[3]) / 100.0;
            }
        }
        out.outcome = OutcomeKind::Reply;
        out.bytes = std::move(reply);
        return out;
    }

    Bytes reply;
    auto st = net::recv_some(sock->fd(), reply, endpoint_.response_timeout_ms);
    if (st == net::RecvStatus::Data) {
        out.outcome = OutcomeKind::Reply;
        out.bytes = std::move(reply);
    } else if (st == net::RecvStatus::Closed) {
        out.outcome = OutcomeKind::ConnectionReset;
    } else {
        out.outcome = OutcomeKind::Timeout;
    }
    return out;
}

Observation Injector::inject(const std::string& case_id, const Bytes& case_bytes) {
    Observation obs;
    obs.case_id = case_id;

    int64_t started = clock_.now_ms();
    WireReply wire = exchange(case_bytes);
    obs.response_time_ms = clock_.now_ms() - started;
    if (wire.outcome == OutcomeKind::Timeout) obs.response_time_ms = endpoint_.response_timeout_ms;
    obs.outcome = wire.outcome;
    obs.reply = std::move(wire.bytes);
    obs.resource_signal = wire.resource_signal;

    obs.liveness_after = probe_liveness().state;
    return obs;
}

LivenessReport Injector::probe_liveness() {
    LivenessReport report;
    int64_t started = clock_.now_ms();

    auto sock = net::tcp_connect(endpoint_.host, endpoint_.port, endpoint_.connect_timeout_ms);
    if (!sock) {
        report.state = Liveness::Down;
        report.detail = "connect failed";
        report.probe_latency_ms = clock_.now_ms() - started;
        return report;
    }
    if (spec_.probe.empty() || !net::send_all(sock->fd(), spec_.probe)) {
        report.state = Liveness::Down;
        report.detail = "probe send failed";
        report.probe_latency_ms = clock_.now_ms() - started;
        return report;
    }

    Bytes reply;
    auto st = net::recv_some(sock->fd(), reply, endpoint_.response_timeout_ms);
    report.probe_latency_ms = clock_.now_ms() - started;
    if (st != net::RecvStatus::Data || reply.empty()) {
        report.state = Liveness::Down;
        report.detail = "no reply to canonical request";
        return report;
    }
    if (!reply_well_formed(reply, endpoint_.protocol_id) ||
        reply_is_exception(reply, endpoint_.protocol_id)) {
        report.state = Liveness::Degraded;
        report.detail = "malformed or exception reply to canonical request";
        return report;
    }
    if (report.probe_latency_ms > endpoint_.response_timeout_ms / 2) {
        report.state = Liveness::Degraded;
        report.detail = "slow reply";
        return report;
    }
    report.state = Liveness::Alive;
    report.detail = "canonical request echoed";
    return report;
}

// ---------------------------------------------------------------------------
// Crash events
// ---------------------------------------------------------------------------

std::optional<CrashEvent> CrashTracker::feed(const Observation& obs, size_t index) {
    if (obs.liveness_after == Liveness::Down) {
        if (down_open_) return std::nullopt;  // same outage, counted once
        down_open_ = true;
        CrashEvent ev;
        ev.open_index = index;
        ev.case_id_at_open = obs.case_id;
        events_.push_back(ev);
        return ev;
    }
    if (obs.liveness_after == Liveness::Alive && down_open_) {
        down_open_ = false;
        events_.back().close_index = index;
    }
    return std::nullopt;
}

std::vector<CrashEvent> crash_ledger(const std::vector<Observation>& observations) {
    CrashTracker tracker;
    for (size_t i = 0; i < observations.size(); ++i) tracker.feed(observations[i], i);
    return tracker.events();
}

}  // namespace icsfuzz::harness
