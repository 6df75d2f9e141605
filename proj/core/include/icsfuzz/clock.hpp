#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <thread>

namespace icsfuzz {

/// Monotonic time source. Agents, the bus registry, and the simulator take a
/// Clock so failure-detection and window logic can run under a virtual clock
/// in tests.
class Clock {
public:
    virtual ~Clock() = default;
    virtual int64_t now_ms() const = 0;
    virtual void sleep_ms(int64_t ms) = 0;
};

class SystemClock final : public Clock {
public:
    int64_t now_ms() const override {
        using namespace std::chrono;
        return duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count();
    }
    void sleep_ms(int64_t ms) override {
        std::this_thread::sleep_for(std::chrono::milliseconds(ms));
    }
    static SystemClock& instance() {
        static SystemClock clock;
        return clock;
    }
};

/// Deterministic clock: time moves only when advanced explicitly.
class VirtualClock final : public Clock {
public:
    explicit VirtualClock(int64_t start_ms = 0) : now_(start_ms) {}
    int64_t now_ms() const override { return now_.load(); }
    void sleep_ms(int64_t ms) override { advance(ms); }
    void advance(int64_t ms) { now_ += ms; }

private:
    std::atomic<int64_t> now_;
};

}  // namespace icsfuzz
