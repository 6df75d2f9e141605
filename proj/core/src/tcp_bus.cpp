#include "icsfuzz/tcp_bus.hpp"

#include <algorithm>
#include <set>

#include "net_util.hpp"

namespace icsfuzz::bus {

using nlohmann::json;

int topic_port_index(const std::string& topic) {
    if (topic == "seed") return 0;
    if (topic == "test_case") return 1;
    return 2;
}

// ---------------------------------------------------------------------------
// Broker
// ---------------------------------------------------------------------------

struct BusBroker::Conn {
    net::Socket sock;
    int port_index;
    Bytes inbox;
    std::set<std::string> topics;
    bool dead = false;
};

BusBroker::BusBroker(BusPorts ports, std::string bind_addr)
    : ports_(ports), bind_addr_(std::move(bind_addr)) {}

BusBroker::~BusBroker() { stop(); }

bool BusBroker::start() {
    if (running_.load()) return true;
    stop_.store(false);
    std::vector<net::Socket> listeners;
    for (uint16_t port : {ports_.seed, ports_.test_case, ports_.other}) {
        auto sock = net::tcp_listen(bind_addr_, port);
        if (!sock) return false;  // port in use
        listeners.push_back(std::move(*sock));
    }
    for (auto& l : listeners) listen_fds_.push_back(l.release());
    running_.store(true);
    io_thread_ = std::thread([this] { io_loop(); });
    return true;
}

void BusBroker::stop() {
    if (!running_.load()) return;
    stop_.store(true);
    if (io_thread_.joinable()) io_thread_.join();
    for (int fd : listen_fds_) ::close(fd);
    listen_fds_.clear();
    conns_.clear();
    running_.store(false);
}

void BusBroker::io_loop() {
    while (!stop_.load()) {
        bool idle = true;

        for (size_t i = 0; i < listen_fds_.size(); ++i) {
            int fd = net::accept_ready(listen_fds_[i], 0);
            if (fd >= 0) {
                auto conn = std::make_unique<Conn>();
                conn->sock = net::Socket(fd);
                conn->port_index = static_cast<int>(i);
                conns_.push_back(std::move(conn));
                idle = false;
            }
        }

        for (auto& conn : conns_) {
            if (conn->dead) continue;
            auto st = net::recv_some(conn->sock.fd(), conn->inbox, 0);
            if (st == net::RecvStatus::Closed || st == net::RecvStatus::Error) {
                conn->dead = true;
                continue;
            }
            if (st != net::RecvStatus::Data) continue;
            idle = false;

            // drain complete frames from the inbox
            while (conn->inbox.size() >= 4) {
                uint32_t len = (uint32_t(conn->inbox[0]) << 24) |
                               (uint32_t(conn->inbox[1]) << 16) |
                               (uint32_t(conn->inbox[2]) << 8) | uint32_t(conn->inbox[3]);
                if (conn->inbox.size() < 4 + len) break;
                std::string payload(conn->inbox.begin() + 4, conn->inbox.begin() + 4 + len);
                conn->inbox.erase(conn->inbox.begin(), conn->inbox.begin() + 4 + len);

                json j = json::parse(payload, nullptr, false);
                if (j.is_discarded() || !j.is_object()) continue;
                std::string op = j.value("op", "");
                if (op == "sub") {
                    for (const auto& t : j.value("topics", std::vector<std::string>{})) {
                        conn->topics.insert(t);
                    }
                } else if (op == "pub") {
                    auto msg = BusMessage::from_json(j.value("msg", json::object()));
                    if (!msg) continue;
                    std::string out = json{{"op", "msg"}, {"msg", msg->to_json()}}.dump();
                    for (auto& peer : conns_) {
                        if (peer->dead || peer->port_index != conn->port_index) continue;
                        if (!peer->topics.count(msg->topic)) continue;
                        if (!net::send_frame(peer->sock.fd(), out)) peer->dead = true;
                    }
                }
            }
        }

        conns_.erase(std::remove_if(conns_.begin(), conns_.end(),
                                    [](const auto& c) { return c->dead; }),
                     conns_.end());
        if (idle) std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

struct TcpBusClient::PortLink {
    uint16_t port = 0;
    net::Socket sock;
    bool connected = false;
    bool wanted = false;                  // any pub/sub interest on this port
    std::set<std::string> sub_topics;     // re-sent after reconnect
    std::deque<BusMessage> outbox;        // buffered while down
    std::thread reader;
    int backoff_ms = 0;
    int64_t next_attempt_ms = 0;
};

TcpBusClient::TcpBusClient(Config config, const std::string& client_id)
    : config_(std::move(config)), client_id_(client_id) {
    for (uint16_t port : {config_.ports.seed, config_.ports.test_case, config_.ports.other}) {
        auto link = std::make_unique<PortLink>();
        link->port = port;
        link->backoff_ms = config_.reconnect_initial_ms;
        links_.push_back(std::move(link));
    }
    maintenance_ = std::thread([this] { maintenance_loop(); });
}

TcpBusClient::~TcpBusClient() { stop(); }

void TcpBusClient::stop() {
    bool expected = false;
    if (!stop_.compare_exchange_strong(expected, true)) return;
    if (maintenance_.joinable()) maintenance_.join();
    for (auto& link : links_) {
        {
            std::lock_guard lock(mutex_);
            link->sock.close();
            link->connected = false;
        }
        if (link->reader.joinable()) link->reader.join();
    }
}

void TcpBusClient::publish(BusMessage msg) {
    check_schema(msg);
    int idx = topic_port_index(msg.topic);
    std::lock_guard lock(mutex_);
    auto& link = *links_[idx];
    link.wanted = true;
    msg.seq = ++next_seq_[{msg.sender, msg.topic}];
    msg.sent_at_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    ++sent_;
    if (link.connected) {
        std::string payload = json{{"op", "pub"}, {"msg", msg.to_json()}}.dump();
        if (net::send_frame(link.sock.fd(), payload)) {
            ++delivered_;
            return;
        }
        link.connected = false;
        link.sock.close();
    }
    if (link.outbox.size() >= config_.buffer_capacity) {
        link.outbox.pop_front();
        ++dropped_;
    }
    link.outbox.push_back(std::move(msg));
}

std::shared_ptr<Subscription> TcpBusClient::subscribe(const std::string& topic,
                                                      const std::string&) {
    const auto& topics = declared_topics();
    if (std::find(topics.begin(), topics.end(), topic) == topics.end()) {
        throw SchemaViolation("unknown topic: " + topic);
    }
    auto sub = std::shared_ptr<Subscription>(new Subscription());
    int idx = topic_port_index(topic);
    std::lock_guard lock(mutex_);
    subs_[topic].push_back(sub);
    auto& link = *links_[idx];
    link.wanted = true;
    bool already = !link.sub_topics.insert(topic).second;
    if (link.connected && !already) {
        std::string payload = json{{"op", "sub"}, {"topics", {topic}}}.dump();
        if (!net::send_frame(link.sock.fd(), payload)) {
            link.connected = false;
            link.sock.close();
        }
    }
    return sub;
}

void TcpBusClient::route_incoming(const BusMessage& msg) {
    std::vector<std::shared_ptr<Subscription>> targets;
    {
        std::lock_guard lock(mutex_);
        auto it = subs_.find(msg.topic);
        if (it == subs_.end()) return;
        for (auto& weak : it->second) {
            if (auto sub = weak.lock()) targets.push_back(sub);
        }
    }
    for (auto& sub : targets) sub->push(msg);
}

void TcpBusClient::reader_loop(int port_index) {
    while (!stop_.load()) {
        int fd;
        {
            std::lock_guard lock(mutex_);
            auto& link = *links_[port_index];
            if (!link.connected) return;
            fd = link.sock.fd();
        }
        std::string payload;
        auto st = net::recv_frame(fd, payload, 100);
        if (st == net::RecvStatus::Timeout) continue;
        if (st != net::RecvStatus::Data) {
            std::lock_guard lock(mutex_);
            auto& link = *links_[port_index];
            link.connected = false;
            link.sock.close();
            return;
        }
        json j = json::parse(payload, nullptr, false);
        if (j.is_discarded()) continue;
        auto msg = BusMessage::from_json(j.value("msg", json::object()));
        if (msg) route_incoming(*msg);
    }
}

void TcpBusClient::maintenance_loop() {
    auto now_ms = [] {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now().time_since_epoch())
            .count();
    };
    while (!stop_.load()) {
        for (size_t i = 0; i < links_.size(); ++i) {
            bool try_connect = false;
            uint16_t port;
            {
                std::lock_guard lock(mutex_);
                auto& link = *links_[i];
                if (link.wanted && !link.connected && now_ms() >= link.next_attempt_ms) {
                    try_connect = true;
                    port = link.port;
                }
            }
            if (!try_connect) continue;

            // The reader exits once connected flips false; join it without the
            // lock it needs for its final iteration.
            if (links_[i]->reader.joinable()) links_[i]->reader.join();

            auto sock = net::tcp_connect(config_.host, port, config_.connect_timeout_ms);
            std::lock_guard lock(mutex_);
            auto& link = *links_[i];
            if (!sock) {
                link.backoff_ms = std::min(link.backoff_ms * 2, config_.reconnect_max_ms);
                link.next_attempt_ms = now_ms() + link.backoff_ms;
                continue;
            }
            link.sock = std::move(*sock);
            link.connected = true;
            link.backoff_ms = config_.reconnect_initial_ms;

            bool ok = true;
            if (!link.sub_topics.empty()) {
                json topics = json::array();
                for (const auto& t : link.sub_topics) topics.push_back(t);
                ok = net::send_frame(link.sock.fd(),
                                     json{{"op", "sub"}, {"topics", topics}}.dump());
            }
            while (ok && !link.outbox.empty()) {
                std::string payload =
                    json{{"op", "pub"}, {"msg", link.outbox.front().to_json()}}.dump();
                ok = net::send_frame(link.sock.fd(), payload);
                if (ok) {
                    link.outbox.pop_front();
                    ++delivered_;
                }
            }
            if (!ok) {
                link.connected = false;
                link.sock.close();
                continue;
            }
            link.reader = std::thread([this, i] { reader_loop(static_cast<int>(i)); });
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
}

uint64_t TcpBusClient::sent() const {
    std::lock_guard lock(mutex_);
    return sent_;
}
uint64_t TcpBusClient::delivered() const {
    std::lock_guard lock(mutex_);
    return delivered_;
}
uint64_t TcpBusClient::buffered() const {
    std::lock_guard lock(mutex_);
    uint64_t n = 0;
    for (const auto& link : links_) n += link->outbox.size();
    return n;
}
uint64_t TcpBusClient::dropped() const {
    std::lock_guard lock(mutex_);
    return dropped_;
}

bool TcpBusClient::connected(int port_index) const {
    std::lock_guard lock(mutex_);
    return links_[port_index]->connected;
}

}  // namespace icsfuzz::bus
