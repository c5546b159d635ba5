#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "duet/backend.hpp"

namespace duet {

// Wire protocol for an out-of-process backend. Every message is a 4-byte
// big-endian length followed by that many bytes. See docs/protocol.md.
namespace wire {

enum class Op : std::uint8_t {
    Open = 1,
    Prefill = 2,
    Decode = 3,
    Checkpoint = 4,
    Rollback = 5,
    Release = 6,
    Close = 7,
    Reset = 8,
};

enum class Status : std::uint8_t {
    Ok = 0,
    ContractError = 1,
    VocabMismatch = 2,
    UnknownSession = 3,
    ProtocolError = 4,
    BackendError = 5,
};

constexpr std::uint32_t max_frame_bytes = 16u << 20;

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void str(const std::string& s); // u16 length + bytes
    std::vector<std::uint8_t>& bytes() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

// Throws ProtocolError on truncated input.
class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& buf, std::size_t pos = 0) : buf_(buf), pos_(pos) {}
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::string str();
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const;
    const std::vector<std::uint8_t>& buf_;
    std::size_t pos_;
};

// Blocking frame I/O on a connected socket. A negative timeout waits forever.
// Throws BackendTimeout, ConnectionLost or ProtocolError.
void send_frame(int fd, const std::vector<std::uint8_t>& frame, int timeout_ms);
std::vector<std::uint8_t> recv_frame(int fd, int timeout_ms);

} // namespace wire

struct RemoteAddress {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;

    static RemoteAddress parse(const std::string& text); // "host:port"
};

// Client. Each session holds its own connection.
class RemoteBackend : public Backend {
public:
    RemoteBackend(RemoteAddress address, int timeout_ms);
    std::unique_ptr<BackendSession> open_session(const std::string& vocab_descriptor) override;

private:
    RemoteAddress address_;
    int timeout_ms_;
};

class RemoteSession : public BackendSession {
public:
    RemoteSession(int fd, std::uint32_t session_id, std::string vocab, int timeout_ms);
    ~RemoteSession() override;

    const std::string& vocab_descriptor() const override { return vocab_; }
    std::size_t cache_len() const override { return cache_len_; }

    std::size_t prefill(const TokenBatch& batch) override;
    TokenId decode_next(const SamplingParams& params, DecodeConstraint constraint = DecodeConstraint::Any) override;
    Mark checkpoint() override;
    void rollback(const Mark& mark) override;
    void release(const Mark& mark) override;
    void reset() override;

    bool poisoned() const { return poisoned_; }
    void set_timeout_ms(int ms) { timeout_ms_ = ms; }

private:
    std::vector<std::uint8_t> call(wire::Op op, wire::Writer& payload);

    int fd_;
    std::uint32_t session_id_;
    std::string vocab_;
    int timeout_ms_;
    std::size_t cache_len_ = 0;
    bool poisoned_ = false;
};

// Serves any Backend over the wire protocol. One thread per connection.
class BackendServer {
public:
    explicit BackendServer(Backend& backend, RemoteAddress bind = {});
    ~BackendServer();

    BackendServer(const BackendServer&) = delete;
    BackendServer& operator=(const BackendServer&) = delete;

    void start();
    void stop();
    std::uint16_t port() const { return port_; }

    // Artificial delay before each reply, for timeout tests.
    void set_reply_delay_ms(int ms) { delay_ms_ = ms; }

    // Handles one request frame; exposed for protocol tests.
    std::vector<std::uint8_t> handle(const std::vector<std::uint8_t>& request,
                                     std::map<std::uint32_t, std::unique_ptr<BackendSession>>& sessions);

private:
    void accept_loop();
    void serve(int fd);

    Backend& backend_;
    RemoteAddress bind_;
    std::uint16_t port_ = 0;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::atomic<int> delay_ms_{0};
    std::atomic<std::uint32_t> next_session_{1};
    std::mutex backend_mutex_;
    std::mutex conn_mutex_;
    std::vector<int> conn_fds_;
    std::vector<std::thread> threads_;
    std::thread acceptor_;
};

} // namespace duet
