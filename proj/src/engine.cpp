// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/engine.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>

#include <spdlog/spdlog.h>

#include "speclab/error.hpp"

namespace speclab {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { b_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(b_); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) b_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> b_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::size_t remaining() const { return b_.size() - pos_; }
    void finish() const {
        if (pos_ != b_.size()) throw FormatError("protocol: " + std::to_string(remaining()) + " trailing bytes");
    }

private:
    std::uint64_t get(int n) {
        if (remaining() < std::size_t(n)) throw FormatError("protocol: message truncated");
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t(b_[pos_ + i]) << (8 * i);
        pos_ += n;
        return v;
    }
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

void write_block(Writer& w, const PayloadBlock& b) {
    w.u32(b.rows);
    w.u32(b.cols);
    for (float v : b.values) w.f32(v);
}

PayloadBlock read_block(Reader& r) {
    PayloadBlock b;
    b.rows = r.u32();
    b.cols = r.u32();
    const std::uint64_t n = std::uint64_t(b.rows) * b.cols;
    if (n * 4 > r.remaining()) throw FormatError("protocol: block larger than message");
    b.values.resize(n);
    for (auto& v : b.values) v = r.f32();
    return b;
}

PayloadBlock to_block(const Tensor& t) {
    PayloadBlock b;
    b.rows = static_cast<std::uint32_t>(t.rows());
    b.cols = static_cast<std::uint32_t>(t.cols());
    b.values.assign(t.data().begin(), t.data().end());
    return b;
}

bool send_all(int fd, const std::uint8_t* p, std::size_t n) {
    while (n > 0) {
        const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
        if (k < 0 && errno == EINTR) continue;
        if (k <= 0) return false;
        p += k;
        n -= static_cast<std::size_t>(k);
    }
    return true;
}

bool recv_all(int fd, std::uint8_t* p, std::size_t n) {
    while (n > 0) {
        const ssize_t k = ::recv(fd, p, n, 0);
        if (k < 0 && errno == EINTR) continue;
        if (k <= 0) return false;
        p += k;
        n -= static_cast<std::size_t>(k);
    }
    return true;
}

bool send_frame(int fd, std::span<const std::uint8_t> payload) {
    std::uint8_t len[4];
    for (int i = 0; i < 4; ++i) len[i] = static_cast<std::uint8_t>(payload.size() >> (8 * i));
    return send_all(fd, len, 4) && send_all(fd, payload.data(), payload.size());
}

enum class FrameResult { Ok, Closed, TooLarge };

FrameResult recv_frame(int fd, std::size_t max_frame, std::vector<std::uint8_t>& out) {
    std::uint8_t len[4];
    if (!recv_all(fd, len, 4)) return FrameResult::Closed;
    const std::uint32_t n = len[0] | (len[1] << 8) | (len[2] << 16) | (std::uint32_t(len[3]) << 24);
    if (n > max_frame) return FrameResult::TooLarge;
    out.resize(n);
    return recv_all(fd, out.data(), n) ? FrameResult::Ok : FrameResult::Closed;
}

bool exchange_handshake(int fd) {
    const auto hs = handshake_bytes();
    if (!send_all(fd, hs.data(), hs.size())) return false;
    std::uint8_t peer[6];
    if (!recv_all(fd, peer, 6)) return false;
    return std::memcmp(peer, hs.data(), 6) == 0;
}

}  // namespace

bool PayloadBlock::operator==(const PayloadBlock& o) const {
    return rows == o.rows && cols == o.cols && values.size() == o.values.size() &&
           std::memcmp(values.data(), o.values.data(), values.size() * sizeof(float)) == 0;
}

std::vector<std::uint8_t> encode_request(const EngineRequest& r) {
    Writer w;
    w.u64(r.id);
    w.u8(r.flags);
    w.u32(static_cast<std::uint32_t>(r.tokens.size()));
    for (auto t : r.tokens) w.u32(t);
    return w.take();
}

EngineRequest decode_request(std::span<const std::uint8_t> payload) {
    Reader rd(payload);
    EngineRequest r;
    r.id = rd.u64();
    r.flags = rd.u8();
    const std::uint32_t n = rd.u32();
    if (std::uint64_t(n) * 4 != rd.remaining())
        throw FormatError("protocol: request declares " + std::to_string(n) + " tokens but carries " +
                          std::to_string(rd.remaining()) + " bytes");
    r.tokens.resize(n);
    for (auto& t : r.tokens) t = rd.u32();
    rd.finish();
    return r;
}

std::vector<std::uint8_t> encode_response(const EngineResponse& r) {
    Writer w;
    w.u64(r.id);
    w.u8(static_cast<std::uint8_t>(r.status));
    w.u8(static_cast<std::uint8_t>((r.logits ? kWantLogits : 0) | (r.fused ? kWantFused : 0)));
    if (r.logits) write_block(w, *r.logits);
    if (r.fused) write_block(w, *r.fused);
    return w.take();
}

EngineResponse decode_response(std::span<const std::uint8_t> payload) {
    Reader rd(payload);
    EngineResponse r;
    r.id = rd.u64();
    const std::uint8_t status = rd.u8();
    if (status > 2) throw FormatError("protocol: unknown status " + std::to_string(status));
    r.status = static_cast<EngineStatus>(status);
    const std::uint8_t present = rd.u8();
    if (present & ~(kWantLogits | kWantFused)) throw FormatError("protocol: unknown block bits");
    if (present & kWantLogits) r.logits = read_block(rd);
    if (present & kWantFused) r.fused = read_block(rd);
    rd.finish();
    return r;
}

std::vector<std::uint8_t> handshake_bytes() {
    Writer w;
    for (char c : {'S', 'P', 'E', 'C'}) w.u8(static_cast<std::uint8_t>(c));
    w.u16(kProtocolVersion);
    return w.take();
}

// ----- in-process -----

InProcessEngine::InProcessEngine(std::shared_ptr<const TargetModel> model, std::size_t max_tokens)
    : model_(std::move(model)), max_tokens_(max_tokens) {
    if (!model_) throw InvalidArgument("engine: no model");
}

EngineResponse InProcessEngine::query(const EngineRequest& request) {
    EngineResponse resp;
    resp.id = request.id;
    const std::size_t n = request.tokens.size();
    const bool bad = n == 0 || n > max_tokens_ || n > model_->config().max_pos ||
                     (request.flags & ~(kWantLogits | kWantFused)) != 0 ||
                     std::any_of(request.tokens.begin(), request.tokens.end(),
                                 [&](std::uint32_t t) { return t >= model_->config().vocab; });
    if (bad) {
        resp.status = EngineStatus::BadRequest;
        return resp;
    }
    if (request.flags == 0) return resp;
    NoGradGuard ng;
    auto out = model_->forward_causal(request.tokens);
    if (request.flags & kWantLogits) resp.logits = to_block(out.logits);
    if (request.flags & kWantFused) resp.fused = to_block(out.fused);
    return resp;
}

// ----- server -----

std::pair<std::string, std::uint16_t> parse_address(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw InvalidArgument("address '" + addr + "' is not HOST:PORT");
    const std::string host = addr.substr(0, colon);
    const std::string port = addr.substr(colon + 1);
    char* end = nullptr;
    const long p = std::strtol(port.c_str(), &end, 10);
    if (port.empty() || *end != '\0' || p < 0 || p > 65535)
        throw InvalidArgument("address '" + addr + "' has an invalid port");
    return {host.empty() ? "127.0.0.1" : host, static_cast<std::uint16_t>(p)};
}

EngineServer::EngineServer(std::shared_ptr<InProcessEngine> engine, ServerOptions opts)
    : engine_(std::move(engine)), opts_(std::move(opts)) {
    if (opts_.max_concurrent == 0) throw InvalidArgument("server: max_concurrent must be positive");
}

EngineServer::~EngineServer() { stop(); }

void EngineServer::start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(std::string("server: socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(opts_.port);
    if (::inet_pton(AF_INET, opts_.host.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        throw InvalidArgument("server: cannot parse host '" + opts_.host + "'");
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 64) < 0) {
        const std::string why = std::strerror(errno);
        ::close(listen_fd_);
        throw Error("server: cannot listen on " + opts_.host + ":" + std::to_string(opts_.port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    spdlog::info("engine listening on {}:{}", opts_.host, port_);
}

void EngineServer::stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
        std::lock_guard lock(mu_);
        for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
        workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
}

void EngineServer::accept_loop() {
    while (running_) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (errno == EINTR) continue;
            break;
        }
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        const bool overloaded = active_.fetch_add(1) >= opts_.max_concurrent;
        std::lock_guard lock(mu_);
        open_fds_.insert(fd);
        workers_.emplace_back([this, fd, overloaded] { serve_connection(fd, overloaded); });
    }
}

void EngineServer::serve_connection(int fd, bool overloaded) {
    std::vector<std::uint8_t> frame;
    if (exchange_handshake(fd)) {
        while (running_) {
            const auto got = recv_frame(fd, opts_.max_frame, frame);
            if (got != FrameResult::Ok) {
                if (got == FrameResult::TooLarge) spdlog::warn("engine: oversized frame, closing connection");
                break;
            }
            EngineResponse resp;
            bool close_after = overloaded;
            try {
                const EngineRequest req = decode_request(frame);
                resp = overloaded ? EngineResponse{req.id, EngineStatus::Overload, {}, {}} : engine_->query(req);
            } catch (const FormatError& e) {
                // Reply when the id is readable, then drop the connection.
                if (frame.size() < 8) break;
                std::uint64_t id = 0;
                for (int i = 0; i < 8; ++i) id |= std::uint64_t(frame[i]) << (8 * i);
                resp = {id, EngineStatus::BadRequest, {}, {}};
                close_after = true;
            }
            const auto bytes = encode_response(resp);
            if (!send_frame(fd, bytes)) break;
            ++served_;
            if (close_after) break;
        }
    }
    {
        std::lock_guard lock(mu_);
        open_fds_.erase(fd);
    }
    ::close(fd);
    --active_;
}

// ----- client -----

SocketEngine::SocketEngine(const std::string& host, std::uint16_t port, std::size_t max_frame)
    : max_frame_(max_frame) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
        throw Error("engine client: cannot resolve " + host);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const int rc = fd_ < 0 ? -1 : ::connect(fd_, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc < 0) {
        if (fd_ >= 0) ::close(fd_);
        throw Error("engine client: cannot connect to " + host + ":" + std::to_string(port));
    }
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    if (!exchange_handshake(fd_)) {
        ::close(fd_);
        throw Error("engine client: handshake failed");
    }
}

SocketEngine::~SocketEngine() {
    if (fd_ >= 0) ::close(fd_);
}

EngineResponse SocketEngine::query(const EngineRequest& request) {
    if (!send_frame(fd_, encode_request(request))) throw Error("engine client: connection lost while sending");
    auto frame = read_frame();
    if (!frame) throw Error("engine client: connection closed before response");
    return decode_response(*frame);
}

void SocketEngine::send_raw_frame(std::span<const std::uint8_t> payload, std::uint32_t declared_length) {
    std::uint8_t len[4];
    for (int i = 0; i < 4; ++i) len[i] = static_cast<std::uint8_t>(declared_length >> (8 * i));
    send_all(fd_, len, 4);
    send_all(fd_, payload.data(), payload.size());
}

std::optional<std::vector<std::uint8_t>> SocketEngine::read_frame() {
    std::vector<std::uint8_t> frame;
    const auto got = recv_frame(fd_, max_frame_, frame);
    if (got == FrameResult::TooLarge) throw FormatError("engine client: oversized response frame");
    if (got == FrameResult::Closed) return std::nullopt;
    return frame;
}

}  // namespace speclab
