#pragma once

// Thin POSIX socket helpers shared by the TCP bus, the injection harness, and
// the SUT simulator. Implementation detail, not installed.

#include <cstdint>
#include <optional>
#include <string>

#include "icsfuzz/bytes.hpp"

namespace icsfuzz::net {

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
    Socket& operator=(Socket&& other) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    ~Socket() { close(); }

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    int release();
    void close();

private:
    int fd_ = -1;
};

std::optional<Socket> tcp_connect(const std::string& host, uint16_t port, int timeout_ms);
std::optional<Socket> tcp_listen(const std::string& bind_addr, uint16_t port, int backlog = 64);

/// Accepts one pending connection if the listener is readable within the
/// timeout; -1 otherwise.
int accept_ready(int listen_fd, int timeout_ms);

bool wait_readable(int fd, int timeout_ms);
bool send_all(int fd, const uint8_t* data, size_t len);
bool send_all(int fd, const Bytes& data);

enum class RecvStatus { Data, Timeout, Closed, Error };

/// Appends whatever is available within the timeout (single recv).
RecvStatus recv_some(int fd, Bytes& out, int timeout_ms);

/// Reads exactly n bytes, allowing up to timeout_ms of total stall.
RecvStatus recv_exact(int fd, Bytes& out, size_t n, int timeout_ms);

/// 4-byte big-endian length prefix + payload.
bool send_frame(int fd, const std::string& payload);
RecvStatus recv_frame(int fd, std::string& payload, int timeout_ms);

}  // namespace icsfuzz::net
