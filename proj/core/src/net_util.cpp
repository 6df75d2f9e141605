#include "net_util.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace icsfuzz::net {

Socket& Socket::operator=(Socket&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

int Socket::release() {
    int fd = fd_;
    fd_ = -1;
    return fd;
}

void Socket::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

namespace {

void set_nonblocking(int fd, bool on) {
    int flags = fcntl(fd, F_GETFL, 0);
    if (on) {
        fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    } else {
        fcntl(fd, F_SETFL, flags & ~O_NONBLOCK);
    }
}

}  // namespace

std::optional<Socket> tcp_connect(const std::string& host, uint16_t port, int timeout_ms) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return std::nullopt;
    Socket sock(fd);

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) return std::nullopt;

    set_nonblocking(fd, true);
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
    if (rc != 0) {
        if (errno != EINPROGRESS) return std::nullopt;
        pollfd pfd{fd, POLLOUT, 0};
        int ready = ::poll(&pfd, 1, timeout_ms);
        if (ready <= 0) return std::nullopt;
        int err = 0;
        socklen_t len = sizeof(err);
        if (getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) != 0 || err != 0) {
            return std::nullopt;
        }
    }
    set_nonblocking(fd, false);
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return sock;
}

std::optional<Socket> tcp_listen(const std::string& bind_addr, uint16_t port, int backlog) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return std::nullopt;
    Socket sock(fd);

    int one = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (inet_pton(AF_INET, bind_addr.c_str(), &addr.sin_addr) != 1) return std::nullopt;

    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) return std::nullopt;
    if (::listen(fd, backlog) != 0) return std::nullopt;
    return sock;
}

int accept_ready(int listen_fd, int timeout_ms) {
    pollfd pfd{listen_fd, POLLIN, 0};
    int ready = ::poll(&pfd, 1, timeout_ms);
    if (ready <= 0) return -1;
    int fd = ::accept(listen_fd, nullptr, nullptr);
    if (fd >= 0) {
        int one = 1;
        setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }
    return fd;
}

bool wait_readable(int fd, int timeout_ms) {
    pollfd pfd{fd, POLLIN, 0};
    return ::poll(&pfd, 1, timeout_ms) > 0;
}

bool send_all(int fd, const uint8_t* data, size_t len) {
    size_t off = 0;
    while (off < len) {
        ssize_t n = ::send(fd, data + off, len - off, MSG_NOSIGNAL);
        if (n <= 0) {
            if (n < 0 && (errno == EINTR)) continue;
            return false;
        }
        off += static_cast<size_t>(n);
    }
    return true;
}

bool send_all(int fd, const Bytes& data) { return send_all(fd, data.data(), data.size()); }

RecvStatus recv_some(int fd, Bytes& out, int timeout_ms) {
    if (!wait_readable(fd, timeout_ms)) return RecvStatus::Timeout;
    uint8_t buf[4096];
    ssize_t n = ::recv(fd, buf, sizeof(buf), 0);
    if (n == 0) return RecvStatus::Closed;
    if (n < 0) return errno == EINTR ? RecvStatus::Timeout : RecvStatus::Error;
    out.insert(out.end(), buf, buf + n);
    return RecvStatus::Data;
}

RecvStatus recv_exact(int fd, Bytes& out, size_t n, int timeout_ms) {
    size_t start = out.size();
    out.resize(start + n);
    size_t have = 0;
    while (have < n) {
        if (!wait_readable(fd, timeout_ms)) {
            out.resize(start + have);
            return RecvStatus::Timeout;
        }
        ssize_t got = ::recv(fd, out.data() + start + have, n - have, 0);
        if (got == 0) {
            out.resize(start + have);
            return RecvStatus::Closed;
        }
        if (got < 0) {
            if (errno == EINTR) continue;
            out.resize(start + have);
            return RecvStatus::Error;
        }
        have += static_cast<size_t>(got);
    }
    return RecvStatus::Data;
}

bool send_frame(int fd, const std::string& payload) {
    Bytes frame;
    frame.reserve(payload.size() + 4);
    uint32_t len = static_cast<uint32_t>(payload.size());
    frame.push_back(static_cast<uint8_t>(len >> 24));
    frame.push_back(static_cast<uint8_t>(len >> 16));
    frame.push_back(static_cast<uint8_t>(len >> 8));
    frame.push_back(static_cast<uint8_t>(len));
    frame.insert(frame.end(), payload.begin(), payload.end());
    return send_all(fd, frame);
}

RecvStatus recv_frame(int fd, std::string& payload, int timeout_ms) {
    Bytes header;
    RecvStatus st = recv_exact(fd, header, 4, timeout_ms);
    if (st != RecvStatus::Data) return st;
    uint32_t len = (uint32_t(header[0]) << 24) | (uint32_t(header[1]) << 16) |
                   (uint32_t(header[2]) << 8) | uint32_t(header[3]);
    if (len > (16u << 20)) return RecvStatus::Error;  // sanity cap
    Bytes body;
    st = recv_exact(fd, body, len, timeout_ms);
    if (st != RecvStatus::Data) return st;
    payload.assign(body.begin(), body.end());
    return RecvStatus::Data;
}

}  // namespace icsfuzz::net
