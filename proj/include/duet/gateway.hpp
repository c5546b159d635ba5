#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "duet/engine.hpp"

namespace duet {

// Record codec: every record is `<decimal byte length>:<payload>`; payload
// fields are separated by single spaces, the first being the message type.
// Field order per type is listed in docs/protocol.md.
namespace gw {

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string frame(std::string_view payload);

// Splits a byte stream into record payloads.
class FrameDecoder {
public:
    void feed(std::string_view bytes);
    // Next complete payload. Throws ProtocolError on a bad length prefix and
    // discards the buffered bytes.
    std::optional<std::string> next();

private:
    std::string buf_;
};

struct ClientMessage {
    enum class Type : std::uint8_t { Hello, NoteOn, NoteOff, Pedal, Takeover, Reclaim, ConfigGet } type = Type::Hello;
    std::optional<double> client_ms; // diagnostic only
    std::string role;                // Hello: performer | observer
    int pitch = 0;
    int velocity = 0;
    Pedal pedal = Pedal::Sustain;
    bool down = false;
};

ClientMessage parse_client(std::string_view payload); // ProtocolError
std::string format_client(const ClientMessage& msg);

// Server records start with `<type> <seq> <server_ms>`; `error` and
// `config` end with free text, everything else has space-free fields.
struct ServerMessage {
    std::string type;
    std::uint64_t seq = 0;
    double server_ms = 0.0;
    std::vector<std::string> fields;
    std::string text;
};

ServerMessage parse_server(std::string_view payload); // ProtocolError
bool has_text(std::string_view type);

} // namespace gw

struct GatewayConfig {
    std::size_t outbox_limit = 256;
    TrackerConfig tracker;
    std::string config_text; // reply to config_get
};

// Transport-independent gateway: roles, message handling, ordered
// broadcast into bounded per-client outboxes. Engine callbacks may come from
// another thread than receive(). Thread-safe.
class GatewayCore : public EngineObserver {
public:
    using ClientId = std::uint64_t;
    enum class Role : std::uint8_t { Observer, Performer };

    GatewayCore(GatewayConfig config, EngineInput& input, const Clock& clock);

    ClientId connect();
    void disconnect(ClientId id);
    void receive(ClientId id, std::string_view payload);
    // Error reply for input that never became a record.
    void reject(ClientId id, const std::string& text);

    // Framed records waiting for this client, oldest first. When older ones
    // were dropped the batch starts with a `gap` record.
    std::string take_output(ClientId id);
    bool has_output(ClientId id) const;

    void heartbeat();

    // Called (without the lock held) when a client's outbox gains data.
    void set_notify(std::function<void(ClientId)> fn);

    std::optional<ClientId> performer() const;
    Role role(ClientId id) const;
    Phase phase() const;
    std::size_t clients() const;

    void on_transition(Phase from, Phase to, double t_ms, const std::string& reason) override;
    void on_report(const TakeoverReport& r) override;
    void on_error(const std::string& text, double t_ms) override;
    void on_human_event(const MidiEvent& ev) override;
    void on_ai_note(const AiNoteInfo& info) override;

private:
    struct Client {
        Role role = Role::Observer;
        std::deque<std::string> outbox; // payloads
        std::size_t dropped = 0;
    };

    void handle(ClientId id, const gw::ClientMessage& msg);
    void broadcast(const std::string& type, double t_ms, const std::string& body);
    void reply(ClientId id, const std::string& type, const std::string& body);
    void push_locked(ClientId id, Client& c, std::string payload, std::vector<ClientId>& woke);
    std::string record_locked(const std::string& type, double t_ms, const std::string& body);
    void wake(const std::vector<ClientId>& ids);

    GatewayConfig config_;
    EngineInput& input_;
    const Clock& clock_;
    mutable std::mutex mutex_;
    std::map<ClientId, Client> clients_;
    std::optional<ClientId> performer_;
    ClientId next_id_ = 1;
    std::uint64_t seq_ = 0;
    Phase phase_ = Phase::Listen;
    std::function<void(ClientId)> notify_;
};

} // namespace duet
