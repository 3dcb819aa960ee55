// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Target engine: a pure function from token sequences to target logits and
// fused tap features, reachable in-process or over a framed TCP protocol.
//
// Wire format (all integers little-endian):
//   handshake, each direction once:  "SPEC" u16 version
//   frame:                           u32 payload length, payload
//   request payload:                 u64 id, u8 flags, u32 n, n x u32 token
//   response payload:                u64 id, u8 status, u8 present,
//                                    per present block: u32 rows, u32 cols,
//                                    rows*cols x f32
// Flags and the present byte share bit meanings: bit 0 logits, bit 1 fused.
// Blocks appear in bit order.

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "speclab/model.hpp"

namespace speclab {

inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::uint8_t kWantLogits = 1;
inline constexpr std::uint8_t kWantFused = 2;
inline constexpr std::size_t kDefaultMaxTokens = 4096;
inline constexpr std::size_t kDefaultMaxFrame = 16u << 20;

enum class EngineStatus : std::uint8_t { Ok = 0, BadRequest = 1, Overload = 2 };

struct EngineRequest {
    std::uint64_t id = 0;
    std::uint8_t flags = 0;
    std::vector<std::uint32_t> tokens;
    bool operator==(const EngineRequest&) const = default;
};

struct PayloadBlock {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<float> values;
    bool operator==(const PayloadBlock& o) const;
};

struct EngineResponse {
    std::uint64_t id = 0;
    EngineStatus status = EngineStatus::Ok;
    std::optional<PayloadBlock> logits;
    std::optional<PayloadBlock> fused;
    bool operator==(const EngineResponse&) const = default;
};

std::vector<std::uint8_t> encode_request(const EngineRequest& r);
/// Throws FormatError on a malformed payload.
EngineRequest decode_request(std::span<const std::uint8_t> payload);
std::vector<std::uint8_t> encode_response(const EngineResponse& r);
EngineResponse decode_response(std::span<const std::uint8_t> payload);

std::vector<std::uint8_t> handshake_bytes();

/// Uniform provider interface shared by both backends.
class EngineBackend {
public:
    virtual ~EngineBackend() = default;
    virtual EngineResponse query(const EngineRequest& request) = 0;
};

class InProcessEngine final : public EngineBackend {
public:
    explicit InProcessEngine(std::shared_ptr<const TargetModel> model, std::size_t max_tokens = kDefaultMaxTokens);
    EngineResponse query(const EngineRequest& request) override;
    const TargetModel& model() const { return *model_; }

private:
    std::shared_ptr<const TargetModel> model_;
    std::size_t max_tokens_;
};

struct ServerOptions {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;  ///< 0 picks a free port
    std::size_t max_concurrent = 4;
    std::size_t max_frame = kDefaultMaxFrame;
};

/// One thread per connection over a shared InProcessEngine. A connection
/// arriving while max_concurrent are open completes the handshake, gets an
/// Overload reply to its first request and is closed.
class EngineServer {
public:
    EngineServer(std::shared_ptr<InProcessEngine> engine, ServerOptions opts);
    ~EngineServer();
    EngineServer(const EngineServer&) = delete;
    EngineServer& operator=(const EngineServer&) = delete;

    void start();
    void stop();
    std::uint16_t port() const { return port_; }
    std::size_t served_requests() const { return served_.load(); }

private:
    void accept_loop();
    void serve_connection(int fd, bool overloaded);

    std::shared_ptr<InProcessEngine> engine_;
    ServerOptions opts_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> running_{false};
    std::atomic<std::size_t> active_{0};
    std::atomic<std::size_t> served_{0};
    std::thread acceptor_;
    std::mutex mu_;
    std::set<int> open_fds_;
    std::vector<std::thread> workers_;
};

/// Synchronous client over one connection.
class SocketEngine final : public EngineBackend {
public:
    SocketEngine(const std::string& host, std::uint16_t port, std::size_t max_frame = kDefaultMaxFrame);
    ~SocketEngine() override;
    SocketEngine(const SocketEngine&) = delete;
    SocketEngine& operator=(const SocketEngine&) = delete;

    EngineResponse query(const EngineRequest& request) override;
    /// Sends an arbitrary frame body; used to exercise server guards.
    void send_raw_frame(std::span<const std::uint8_t> payload, std::uint32_t declared_length);
    /// Next response frame, or nullopt once the server closed the socket.
    std::optional<std::vector<std::uint8_t>> read_frame();

private:
    int fd_ = -1;
    std::size_t max_frame_;
};

/// Parses "HOST:PORT".
std::pair<std::string, std::uint16_t> parse_address(const std::string& addr);

}  // namespace speclab
