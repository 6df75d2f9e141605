#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsfuzz/bytes.hpp"
#include "icsfuzz/clock.hpp"

namespace icsfuzz::harness {

inline constexpr const char* kBugSessionExhaustion = "session_exhaustion";
inline constexpr const char* kBugLengthOverflowCrash = "length_overflow_crash";
inline constexpr const char* kBugIoHaltOnBurst = "io_halt_on_burst";

struct SimulatorConfig {
    uint16_t port = 15502;
    std::string bind_addr = "127.0.0.1";
    std::set<std::string> bugs_enabled;
    uint32_t session_limit = 64;
    bool resource_channel = false;

    /// Stall window after which a partially received frame is treated as
    /// broken (and, with the overflow bug armed, as a crash trigger).
    int frame_timeout_ms = 40;
    /// Stale-session fraction beyond which replies degrade to busy exceptions.
    double busy_watermark = 0.75;
    /// Burst rule: this many malformed FC-16 writes inside burst_window_ms.
    int burst_threshold = 5;
    int burst_window_ms = 1000;

    std::string event_log_path;  // optional JSONL log of per-request events
};

struct SimulatorStats {
    uint64_t accepted = 0;
    uint64_t frames = 0;
    uint64_t replies = 0;
    uint64_t exceptions = 0;
    uint64_t dirty_closes = 0;
    uint64_t clean_closes = 0;
    uint64_t refused_hint = 0;  // connects seen while exhausted (post-restart)
    uint32_t stale_sessions = 0;
    bool crashed = false;
    bool write_halted = false;
    bool exhausted = false;
};

/// Modbus/TCP server with correct FC 01-06, 0F, 10 semantics and optional
/// seeded bugs. The protocol handling here is written independently of the
/// schema-driven codec so the two sides of the loop do not share parsing code.
class Simulator {
public:
    ~Simulator();
    Simulator(const Simulator&) = delete;
    Simulator& operator=(const Simulator&) = delete;

    /// Binds and serves on config.port. Error (PortInUse) when the port is taken.
    static Result<std::unique_ptr<Simulator>, std::string> start(SimulatorConfig config,
                                                                 Clock& clock = SystemClock::instance());

    void stop();

    /// Clears sessions, halt and crash state, and resumes serving.
    void restart();

    bool serving() const;
    uint16_t port() const { return config_.port; }
    const SimulatorConfig& config() const { return config_; }

    SimulatorStats stats() const;
    std::vector<nlohmann::json> events() const;

private:
    explicit Simulator(SimulatorConfig config, Clock& clock);

    struct Conn {
        int fd = -1;
        Bytes inbox;
        int64_t last_progress_ms = 0;
        bool framing_dirty = false;
        bool open = true;
    };

    void serve_loop();
    void process_inbox(Conn& conn);
    void handle_frame(Conn& conn, const Bytes& frame);
    Bytes build_reply(const Bytes& frame, bool& exception_out);
    void append_trailer(Bytes& reply);
    void close_conn(Conn& conn, bool dirty);
    void trigger_crash(const std::string& reason);
    void enter_exhausted();
    void log_event(const std::string& kind, nlohmann::json detail = {});

    SimulatorConfig config_;
    Clock& clock_;

    std::atomic<bool> stop_flag_{false};
    std::atomic<bool> restart_flag_{false};
    std::atomic<bool> serving_{false};
    std::thread thread_;

    // serve-loop state (owned by the thread)
    int listen_fd_ = -1;
    std::vector<Conn> conns_;
    std::deque<int64_t> malformed_write_times_;

    // data model
    std::array<uint16_t, 65536> holding_{};
    std::array<uint16_t, 65536> input_{};
    std::vector<uint8_t> coils_ = std::vector<uint8_t>(65536 / 8, 0);
    std::vector<uint8_t> discrete_ = std::vector<uint8_t>(65536 / 8, 0);

    mutable std::mutex state_mutex_;
    SimulatorStats stats_;
    std::vector<nlohmann::json> events_;
};

}  // namespace icsfuzz::harness
