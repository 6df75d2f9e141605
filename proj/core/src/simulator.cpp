#include "icsfuzz/simulator.hpp"

#include <fstream>

#include "net_util.hpp"

namespace icsfuzz::harness {

using nlohmann::json;

namespace {

constexpr uint8_t kExcIllegalFunction = 0x01;
constexpr uint8_t kExcIllegalAddress = 0x02;
constexpr uint8_t kExcIllegalValue = 0x03;
constexpr uint8_t kExcServerBusy = 0x06;

uint16_t rd16(const Bytes& b, size_t off) {
    return static_cast<uint16_t>((b[off] << 8) | b[off + 1]);
}

void wr16(Bytes& b, uint16_t v) {
    b.push_back(static_cast<uint8_t>(v >> 8));
    b.push_back(static_cast<uint8_t>(v & 0xFF));
}

}  // namespace

Simulator::Simulator(SimulatorConfig config, Clock& clock)
    : config_(std::move(config)), clock_(clock) {}

Simulator::~Simulator() { stop(); }

Result<std::unique_ptr<Simulator>, std::string> Simulator::start(SimulatorConfig config,
                                                                 Clock& clock) {
    auto listener = net::tcp_listen(config.bind_addr, config.port);
    if (!listener) {
        return std::string("PortInUse: cannot bind " + config.bind_addr + ":" +
                           std::to_string(config.port));
    }
    auto sim = std::unique_ptr<Simulator>(new Simulator(std::move(config), clock));
    sim->listen_fd_ = listener->release();
    sim->serving_.store(true);
    sim->log_event("listen", {{"port", sim->config_.port}});
    sim->thread_ = std::thread([raw = sim.get()] { raw->serve_loop(); });
    return sim;
}

void Simulator::stop() {
    if (thread_.joinable()) {
        stop_flag_.store(true);
        thread_.join();
    }
    if (listen_fd_ >= 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
}

void Simulator::restart() {
    restart_flag_.store(true);
    for (int i = 0; i < 500 && !serving(); ++i) clock_.sleep_ms(2);
}

bool Simulator::serving() const { return serving_.load(); }

SimulatorStats Simulator::stats() const {
    std::lock_guard lock(state_mutex_);
    return stats_;
}

std::vector<nlohmann::json> Simulator::events() const {
    std::lock_guard lock(state_mutex_);
    return events_;
}

void Simulator::log_event(const std::string& kind, json detail) {
    std::lock_guard lock(state_mutex_);
    json rec{{"ev", kind}, {"at_ms", clock_.now_ms()}};
    if (!detail.is_null()) rec["detail"] = std::move(detail);
    events_.push_back(rec);
    if (!config_.event_log_path.empty()) {
        std::ofstream out(config_.event_log_path, std::ios::app);
        out << events_.back().dump() << "\n";
    }
}

void Simulator::serve_loop() {
    while (!stop_flag_.load()) {
        if (restart_flag_.load()) {
            for (auto& c : conns_) {
                if (c.open) ::close(c.fd);
            }
            conns_.clear();
            malformed_write_times_.clear();
            {
                std::lock_guard lock(state_mutex_);
                stats_.crashed = false;
                stats_.write_halted = false;
                stats_.exhausted = false;
                stats_.stale_sessions = 0;
            }
            if (listen_fd_ < 0) {
                auto listener = net::tcp_listen(config_.bind_addr, config_.port);
                if (listener) listen_fd_ = listener->release();
            }
            restart_flag_.store(false);
            serving_.store(listen_fd_ >= 0);
            log_event("restart");
        }

        if (!serving_.load()) {
            clock_.sleep_ms(2);
            continue;
        }

        bool busy = false;

        if (listen_fd_ >= 0) {
            int fd = net::accept_ready(listen_fd_, 0);
            if (fd >= 0) {
                Conn conn;
                conn.fd = fd;
                conn.last_progress_ms = clock_.now_ms();
                conns_.push_back(conn);
                {
                    std::lock_guard lock(state_mutex_);
                    ++stats_.accepted;
                }
                log_event("accept");
                busy = true;
            }
        }

        for (auto& conn : conns_) {
            if (!conn.open) continue;
            size_t before = conn.inbox.size();
            auto st = net::recv_some(conn.fd, conn.inbox, 0);
            if (st == net::RecvStatus::Closed) {
                close_conn(conn, conn.framing_dirty);
                continue;
            }
            if (st == net::RecvStatus::Error) {
                close_conn(conn, true);
                continue;
            }
            if (conn.inbox.size() != before) {
                conn.last_progress_ms = clock_.now_ms();
                busy = true;
            }
            process_inbox(conn);
        }

        conns_.erase(std::remove_if(conns_.begin(), conns_.end(),
                                    [](const Conn& c) { return !c.open; }),
                     conns_.end());

        if (!busy) clock_.sleep_ms(1);
    }

    for (auto& c : conns_) {
        if (c.open) ::close(c.fd);
    }
    conns_.clear();
    serving_.store(false);
}

void Simulator::process_inbox(Conn& conn) {
    while (conn.open && conn.inbox.size() >= 7) {
        uint16_t protocol = rd16(conn.inbox, 2);
        uint16_t length = rd16(conn.inbox, 4);
        if (protocol != 0 || length == 0 || length > 300) {
            // Not resynchronizable: a broken MBAP kills the connection.
            conn.framing_dirty = true;
            close_conn(conn, true);
            return;
        }
        size_t total = 6 + static_cast<size_t>(length);
        if (conn.inbox.size() < total) {
            // wait for the rest; stall handling happens below
            break;
        }
        Bytes frame(conn.inbox.begin(), conn.inbox.begin() + total);
        conn.inbox.erase(conn.inbox.begin(), conn.inbox.begin() + total);
        conn.last_progress_ms = clock_.now_ms();
        handle_frame(conn, frame);
    }

    if (!conn.open || conn.inbox.empty()) return;
    if (clock_.now_ms() - conn.last_progress_ms < config_.frame_timeout_ms) return;

    // Stalled mid-frame. With the overflow bug armed, a declared length far
    // beyond the bytes actually sent terminates the process.
    if (conn.inbox.size() >= 7) {
        size_t declared_total = 6 + static_cast<size_t>(rd16(conn.inbox, 4));
        size_t gap = declared_total > conn.inbox.size() ? declared_total - conn.inbox.size() : 0;
        if (gap > 2 && config_.bugs_enabled.count(kBugLengthOverflowCrash)) {
            trigger_crash("mbap length exceeds payload by " + std::to_string(gap));
            return;
        }
    }
    conn.framing_dirty = true;
    close_conn(conn, true);
}

void Simulator::handle_frame(Conn& conn, const Bytes& frame) {
    {
        std::lock_guard lock(state_mutex_);
        ++stats_.frames;
    }

    bool halted_write = false;
    uint8_t fc = frame.size() > 7 ? frame[7] : 0;
    {
        std::lock_guard lock(state_mutex_);
        halted_write = stats_.write_halted && (fc == 5 || fc == 6 || fc == 15 || fc == 16);
    }
    if (halted_write) {
        log_event("write_path_dead", {{"fc", fc}});
        return;  // swallowed: the write path stays unresponsive until restart
    }

    bool exception = false;
    Bytes reply = build_reply(frame, exception);
    append_trailer(reply);

    {
        std::lock_guard lock(state_mutex_);
        ++stats_.replies;
        if (exception) ++stats_.exceptions;
    }
    log_event(exception ? "exception" : "reply", {{"fc", fc}});
    if (!net::send_all(conn.fd, reply)) close_conn(conn, true);
}

Bytes Simulator::build_reply(const Bytes& frame, bool& exception_out) {
    uint16_t transaction = rd16(frame, 0);
    uint8_t unit = frame[6];
    Bytes pdu(frame.begin() + 7, frame.end());

    auto mbap_reply = [&](const Bytes& reply_pdu) {
        Bytes out;
        wr16(out, transaction);
        wr16(out, 0);
        wr16(out, static_cast<uint16_t>(reply_pdu.size() + 1));
        out.push_back(unit);
        out.insert(out.end(), reply_pdu.begin(), reply_pdu.end());
        return out;
    };
    auto exception_reply = [&](uint8_t fc, uint8_t code) {
        exception_out = true;
        return mbap_reply({static_cast<uint8_t>(fc | 0x80), code});
    };

    if (pdu.empty()) return exception_reply(0, kExcIllegalFunction);
    uint8_t fc = pdu[0];

    // Near session exhaustion the device degrades before going dark.
    if (config_.bugs_enabled.count(kBugSessionExhaustion)) {
        std::lock_guard lock(state_mutex_);
        if (stats_.stale_sessions >=
            static_cast<uint32_t>(config_.busy_watermark * config_.session_limit)) {
            exception_out = true;
            Bytes out;
            wr16(out, transaction);
            wr16(out, 0);
            wr16(out, 3);
            out.push_back(unit);
            out.push_back(static_cast<uint8_t>(fc | 0x80));
            out.push_back(kExcServerBusy);
            return out;
        }
    }

    auto note_malformed_write = [&] {
        if (fc != 16 || !config_.bugs_enabled.count(kBugIoHaltOnBurst)) return;
        int64_t now = clock_.now_ms();
        malformed_write_times_.push_back(now);
        while (!malformed_write_times_.empty() &&
               now - malformed_write_times_.front() > config_.burst_window_ms) {
            malformed_write_times_.pop_front();
        }
        if (malformed_write_times_.size() >= static_cast<size_t>(config_.burst_threshold)) {
            std::lock_guard lock(state_mutex_);
            if (!stats_.write_halted) {
                stats_.write_halted = true;
                events_.push_back(json{{"ev", "write_halt"}, {"at_ms", now}});
            }
        }
    };

    switch (fc) {
        case 1:
        case 2: {
            if (pdu.size() != 5) return exception_reply(fc, kExcIllegalValue);
            uint32_t addr = rd16(pdu, 1), count = rd16(pdu, 3);
            if (count < 1 || count > 2000) return exception_reply(fc, kExcIllegalValue);
            if (addr + count > 65536) return exception_reply(fc, kExcIllegalAddress);
            const auto& bits = fc == 1 ? coils_ : discrete_;
            Bytes out{fc, static_cast<uint8_t>((count + 7) / 8)};
            for (uint32_t base = 0; base < count; base += 8) {
                uint8_t b = 0;
                for (uint32_t i = 0; i < 8 && base + i < count; ++i) {
                    uint32_t bit = addr + base + i;
                    if (bits[bit / 8] & (1 << (bit % 8))) b |= (1 << i);
                }
                out.push_back(b);
            }
            return mbap_reply(out);
        }
        case 3:
        case 4: {
            if (pdu.size() != 5) return exception_reply(fc, kExcIllegalValue);
            uint32_t addr = rd16(pdu, 1), count = rd16(pdu, 3);
            if (count < 1 || count > 125) return exception_reply(fc, kExcIllegalValue);
            if (addr + count > 65536) return exception_reply(fc, kExcIllegalAddress);
            const auto& regs = fc == 3 ? holding_ : input_;
            Bytes out{fc, static_cast<uint8_t>(count * 2)};
            for (uint32_t i = 0; i < count; ++i) wr16(out, regs[addr + i]);
            return mbap_reply(out);
        }
        case 5: {
            if (pdu.size() != 5) return exception_reply(fc, kExcIllegalValue);
            uint16_t addr = rd16(pdu, 1), value = rd16(pdu, 3);
            if (value != 0x0000 && value != 0xFF00) return exception_reply(fc, kExcIllegalValue);
            if (value) {
                coils_[addr / 8] |= (1 << (addr % 8));
            } else {
                coils_[addr / 8] &= ~(1 << (addr % 8));
            }
            return mbap_reply(pdu);  // echo
        }
        case 6: {
            if (pdu.size() != 5) return exception_reply(fc, kExcIllegalValue);
            uint16_t addr = rd16(pdu, 1), value = rd16(pdu, 3);
            holding_[addr] = value;
            return mbap_reply(pdu);  // echo
        }
        case 15: {
            if (pdu.size() < 6) return exception_reply(fc, kExcIllegalValue);
            uint32_t addr = rd16(pdu, 1), count = rd16(pdu, 3);
            uint8_t byte_count = pdu[5];
            if (count < 1 || count > 1968 || byte_count != (count + 7) / 8 ||
                pdu.size() != 6u + byte_count) {
                return exception_reply(fc, kExcIllegalValue);
            }
            if (addr + count > 65536) return exception_reply(fc, kExcIllegalAddress);
            for (uint32_t i = 0; i < count; ++i) {
                bool on = pdu[6 + i / 8] & (1 << (i % 8));
                uint32_t bit = addr + i;
                if (on) {
                    coils_[bit / 8] |= (1 << (bit % 8));
                } else {
                    coils_[bit / 8] &= ~(1 << (bit % 8));
                }
            }
            Bytes out{fc};
            wr16(out, static_cast<uint16_t>(addr));
            wr16(out, static_cast<uint16_t>(count));
            return mbap_reply(out);
        }
        case 16: {
            if (pdu.size() < 6) {
                note_malformed_write();
                return exception_reply(fc, kExcIllegalValue);
            }
            uint32_t addr = rd16(pdu, 1), count = rd16(pdu, 3);
            uint8_t byte_count = pdu[5];
            if (count < 1 || count > 123 || byte_count != count * 2 ||
                pdu.size() != 6u + byte_count) {
                note_malformed_write();
                return exception_reply(fc, kExcIllegalValue);
            }
            if (addr + count > 65536) {
                note_malformed_write();
                return exception_reply(fc, kExcIllegalAddress);
            }
            for (uint32_t i = 0; i < count; ++i) holding_[addr + i] = rd16(pdu, 6 + i * 2);
            Bytes out{fc};
            wr16(out, static_cast<uint16_t>(addr));
            wr16(out, static_cast<uint16_t>(count));
            return mbap_reply(out);
        }
        default:
            return exception_reply(fc, kExcIllegalFunction);
    }
}

void Simulator::append_trailer(Bytes& reply) {
    if (!config_.resource_channel) return;
    double fraction;
    {
        std::lock_guard lock(state_mutex_);
        fraction = config_.session_limit
                       ? static_cast<double>(stats_.stale_sessions) / config_.session_limit
                       : 0.0;
    }
    uint16_t scaled = static_cast<uint16_t>(fraction * 1000.0 + 0.5);
    reply.push_back('R');
    reply.push_back('S');
    wr16(reply, scaled);
}

void Simulator::close_conn(Conn& conn, bool dirty) {
    if (!conn.open) return;
    ::close(conn.fd);
    conn.open = false;

    bool exhaust_now = false;
    {
        std::lock_guard lock(state_mutex_);
        if (dirty) {
            ++stats_.dirty_closes;
        } else {
            ++stats_.clean_closes;
        }
        if (dirty && config_.bugs_enabled.count(kBugSessionExhaustion)) {
            // The session slot of a connection that broke framing is never
            // reclaimed; the pool drains until restart.
            ++stats_.stale_sessions;
            if (stats_.stale_sessions >= config_.session_limit && !stats_.exhausted) {
                stats_.exhausted = true;
                exhaust_now = true;
            }
        }
    }
    log_event(dirty ? "close_dirty" : "close_clean");
    if (exhaust_now) enter_exhausted();
}

void Simulator::enter_exhausted() {
    log_event("exhausted", {{"stale_sessions", config_.session_limit}});
    if (listen_fd_ >= 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
    for (auto& c : conns_) {
        if (c.open) {
            ::close(c.fd);
            c.open = false;
        }
    }
    serving_.store(false);
}

void Simulator::trigger_crash(const std::string& reason) {
    {
        std::lock_guard lock(state_mutex_);
        stats_.crashed = true;
    }
    log_event("crash", {{"reason", reason}});
    if (listen_fd_ >= 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
    for (auto& c : conns_) {
        if (c.open) {
            ::close(c.fd);
            c.open = false;
        }
    }
    serving_.store(false);
}

}  // namespace icsfuzz::harness
