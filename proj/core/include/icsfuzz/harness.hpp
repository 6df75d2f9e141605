#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icsfuzz/bytes.hpp"
#include "icsfuzz/clock.hpp"
#include "icsfuzz/protocol.hpp"

namespace icsfuzz::harness {

struct TargetEndpoint {
    std::string host = "127.0.0.1";
    uint16_t port = 0;
    std::string protocol_id;
    int connect_timeout_ms = 250;
    int response_timeout_ms = 120;
    int max_retries = 2;
    int backoff_base_ms = 15;
    bool resource_channel = false;  // strip and report the simulator trailer
};

enum class OutcomeKind { Reply, Timeout, ConnectionReset, ConnectionRefused };
std::string to_string(OutcomeKind kind);
std::optional<OutcomeKind> outcome_from(const std::string& s);

enum class Liveness { Alive, Degraded, Down };
std::string to_string(Liveness state);
std::optional<Liveness> liveness_from(const std::string& s);

struct Observation {
    std::string case_id;
    OutcomeKind outcome = OutcomeKind::Timeout;
    Bytes reply;
    int64_t response_time_ms = 0;
    Liveness liveness_after = Liveness::Alive;
    double resource_signal = 0.0;  // 0 when the target offers no channel
};

struct LivenessReport {
    Liveness state = Liveness::Down;
    int64_t probe_latency_ms = 0;
    std::string detail;
};

/// Opens one connection at a time against the endpoint, writes a case, reads
/// the reply with protocol-aware framing, and probes liveness afterwards.
class Injector {
public:
    Injector(TargetEndpoint endpoint, const proto::ProtocolSpec& spec,
             Clock& clock = SystemClock::instance());

    /// Every call yields exactly one Observation; unreachability is reported
    /// as a connection-refused outcome, not an error.
    Observation inject(const std::string& case_id, const Bytes& case_bytes);

    /// Fresh connection, canonical benign request, classify the echo.
    LivenessReport probe_liveness();

    const TargetEndpoint& endpoint() const { return endpoint_; }

private:
    struct WireReply {
        OutcomeKind outcome;
        Bytes bytes;
        double resource_signal = 0.0;
    };
    WireReply exchange(const Bytes& payload);

    TargetEndpoint endpoint_;
    const proto::ProtocolSpec& spec_;
    Clock& clock_;
};

/// True when the reply parses as a plausible frame of the protocol (without
/// judging exception semantics, which classification handles).
bool reply_well_formed(const Bytes& reply, const std::string& protocol_id);

/// True when a Modbus reply signals a protocol exception.
bool reply_is_exception(const Bytes& reply, const std::string& protocol_id);

// ---------------------------------------------------------------------------
// Crash events
// ---------------------------------------------------------------------------

struct CrashEvent {
    size_t open_index = 0;                    // observation index of the opening transition
    std::optional<size_t> close_index;        // next alive probe, when seen
    std::string case_id_at_open;
};

/// Streaming alive->down edge detector: consecutive down probes inside one
/// outage count once.
class CrashTracker {
public:
    /// Returns the event opened by this observation, if any.
    std::optional<CrashEvent> feed(const Observation& obs, size_t index);
    const std::vector<CrashEvent>& events() const { return events_; }

private:
    bool down_open_ = false;
    std::vector<CrashEvent> events_;
};

std::vector<CrashEvent> crash_ledger(const std::vector<Observation>& observations);

}  // namespace icsfuzz::harness
