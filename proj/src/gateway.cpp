#include "duet/gateway.hpp"

#include <charconv>

#include <fmt/format.h>

namespace duet {

namespace gw {

namespace {

std::vector<std::string_view> split(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i <= s.size()) {
        const auto j = s.find(' ', i);
        const auto end = j == std::string_view::npos ? s.size() : j;
        out.push_back(s.substr(i, end - i));
        if (j == std::string_view::npos) {
            break;
        }
        i = j + 1;
    }
    return out;
}

template <class T>
T number(std::string_view v, const char* what) {
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ProtocolError(fmt::format("bad {}: '{}'", what, v));
    }
    return out;
}

std::optional<double> client_time(std::string_view v) {
    if (v == "-") {
        return std::nullopt;
    }
    return number<double>(v, "client_ms");
}

std::string time_field(const std::optional<double>& t) {
    return t ? fmt::format("{:.3f}", *t) : std::string("-");
}

} // namespace

std::string frame(std::string_view payload) {
    return fmt::format("{}:{}", payload.size(), payload);
}

void FrameDecoder::feed(std::string_view bytes) {
    buf_.append(bytes);
}

std::optional<std::string> FrameDecoder::next() {
    const auto colon = buf_.find(':');
    if (colon == std::string::npos) {
        if (buf_.size() > 10 || buf_.find_first_not_of("0123456789") != std::string::npos) {
            buf_.clear();
            throw ProtocolError("bad record length");
        }
        return std::nullopt;
    }
    std::size_t len = 0;
    const auto [p, ec] = std::from_chars(buf_.data(), buf_.data() + colon, len);
    if (colon == 0 || colon > 10 || ec != std::errc() || p != buf_.data() + colon || len > (1u << 20)) {
        buf_.clear();
        throw ProtocolError("bad record length");
    }
    if (buf_.size() < colon + 1 + len) {
        return std::nullopt;
    }
    std::string payload = buf_.substr(colon + 1, len);
    buf_.erase(0, colon + 1 + len);
    return payload;
}

ClientMessage parse_client(std::string_view payload) {
    const auto f = split(payload);
    auto need = [&](std::size_t n) {
        if (f.size() != n) {
            throw ProtocolError(fmt::format("'{}' takes {} fields", f[0], n - 1));
        }
    };
    ClientMessage m;
    const auto type = f[0];
    if (type == "hello") {
        need(2);
        m.type = ClientMessage::Type::Hello;
        if (f[1] != "performer" && f[1] != "observer") {
            throw ProtocolError(fmt::format("unknown role '{}'", f[1]));
        }
        m.role = std::string(f[1]);
        return m;
    }
    if (type == "note_on") {
        need(4);
        m.type = ClientMessage::Type::NoteOn;
        m.pitch = number<int>(f[2], "pitch");
        m.velocity = number<int>(f[3], "velocity");
        if (m.velocity < 1 || m.velocity > 127) {
            throw ProtocolError("velocity out of range");
        }
    } else if (type == "note_off") {
        need(3);
        m.type = ClientMessage::Type::NoteOff;
        m.pitch = number<int>(f[2], "pitch");
    } else if (type == "pedal") {
        need(4);
        m.type = ClientMessage::Type::Pedal;
        if (f[2] == "sustain") {
            m.pedal = Pedal::Sustain;
        } else if (f[2] == "soft") {
            m.pedal = Pedal::SoftUnaCorda;
        } else {
            throw ProtocolError(fmt::format("unknown pedal '{}'", f[2]));
        }
        if (f[3] != "on" && f[3] != "off") {
            throw ProtocolError(fmt::format("bad pedal state '{}'", f[3]));
        }
        m.down = f[3] == "on";
    } else if (type == "takeover" || type == "reclaim" || type == "config_get") {
        need(2);
        m.type = type == "takeover" ? ClientMessage::Type::Takeover
                 : type == "reclaim" ? ClientMessage::Type::Reclaim
                                     : ClientMessage::Type::ConfigGet;
    } else {
        throw ProtocolError(fmt::format("unknown message type '{}'", type));
    }
    m.client_ms = client_time(f[1]);
    if ((m.type == ClientMessage::Type::NoteOn || m.type == ClientMessage::Type::NoteOff) &&
        (m.pitch < 0 || m.pitch > 127)) {
        throw ProtocolError("pitch out of range");
    }
    return m;
}

std::string format_client(const ClientMessage& m) {
    const auto t = time_field(m.client_ms);
    switch (m.type) {
    case ClientMessage::Type::Hello:
        return "hello " + m.role;
    case ClientMessage::Type::NoteOn:
        return fmt::format("note_on {} {} {}", t, m.pitch, m.velocity);
    case ClientMessage::Type::NoteOff:
        return fmt::format("note_off {} {}", t, m.pitch);
    case ClientMessage::Type::Pedal:
        return fmt::format("pedal {} {} {}", t, m.pedal == Pedal::Sustain ? "sustain" : "soft", m.down ? "on" : "off");
    case ClientMessage::Type::Takeover:
        return "takeover " + t;
    case ClientMessage::Type::Reclaim:
        return "reclaim " + t;
    case ClientMessage::Type::ConfigGet:
        return "config_get " + t;
    }
    return {};
}

bool has_text(std::string_view type) {
    return type == "error" || type == "config";
}

ServerMessage parse_server(std::string_view payload) {
    ServerMessage m;
    const auto a = payload.find(' ');
    const auto b = a == std::string_view::npos ? a : payload.find(' ', a + 1);
    if (b == std::string_view::npos) {
        throw ProtocolError("server record needs type, seq and time");
    }
    m.type = std::string(payload.substr(0, a));
    m.seq = number<std::uint64_t>(payload.substr(a + 1, b - a - 1), "seq");
    const auto c = payload.find(' ', b + 1);
    const auto tend = c == std::string_view::npos ? payload.size() : c;
    m.server_ms = number<double>(payload.substr(b + 1, tend - b - 1), "server_ms");
    if (c == std::string_view::npos) {
        return m;
    }
    const auto rest = payload.substr(c + 1);
    if (has_text(m.type)) {
        m.text = std::string(rest);
    } else {
        for (auto f : split(rest)) {
            m.fields.emplace_back(f);
        }
    }
    return m;
}

} // namespace gw

namespace {

std::string opt_ms(const std::optional<double>& t) {
    return t ? fmt::format("{:.3f}", *t) : std::string("-");
}

const char* status_name(AiNoteInfo::Status s) {
    switch (s) {
    case AiNoteInfo::Status::Scheduled:
        return "scheduled";
    case AiNoteInfo::Status::Sounded:
        return "sounded";
    case AiNoteInfo::Status::Dropped:
        return "dropped";
    }
    return "?";
}

} // namespace

GatewayCore::GatewayCore(GatewayConfig config, EngineInput& input, const Clock& clock)
    : config_(std::move(config)), input_(input), clock_(clock) {
    if (config_.outbox_limit < 1) {
        throw std::invalid_argument("GatewayCore: outbox_limit must be positive");
    }
}

void GatewayCore::set_notify(std::function<void(ClientId)> fn) {
    std::lock_guard lock(mutex_);
    notify_ = std::move(fn);
}

GatewayCore::ClientId GatewayCore::connect() {
    ClientId id = 0;
    {
        std::lock_guard lock(mutex_);
        id = next_id_++;
        clients_[id] = Client{};
    }
    reply(id, "welcome", fmt::format("{} observer {}", id, to_string(phase())));
    return id;
}

void GatewayCore::disconnect(ClientId id) {
    std::lock_guard lock(mutex_);
    clients_.erase(id);
    if (performer_ == id) {
        performer_.reset();
    }
}

void GatewayCore::receive(ClientId id, std::string_view payload) {
    try {
        handle(id, gw::parse_client(payload));
    } catch (const gw::ProtocolError& e) {
        reply(id, "error", e.what());
    }
}

void GatewayCore::reject(ClientId id, const std::string& text) {
    reply(id, "error", text);
}

void GatewayCore::handle(ClientId id, const gw::ClientMessage& msg) {
    using Type = gw::ClientMessage::Type;
    if (msg.type == Type::Hello) {
        std::string outcome;
        {
            std::lock_guard lock(mutex_);
            auto it = clients_.find(id);
            if (it == clients_.end()) {
                return;
            }
            if (msg.role == "performer") {
                if (performer_ && performer_ != id) {
                    outcome = "performer slot taken";
                } else {
                    performer_ = id;
                    it->second.role = Role::Performer;
                }
            } else {
                if (performer_ == id) {
                    performer_.reset();
                }
                it->second.role = Role::Observer;
            }
        }
        if (!outcome.empty()) {
            reply(id, "error", outcome);
        }
        reply(id, "role", role(id) == Role::Performer ? "performer" : "observer");
        return;
    }
    if (msg.type == Type::ConfigGet) {
        reply(id, "config", config_.config_text);
        return;
    }
    if (role(id) != Role::Performer) {
        reply(id, "error", "only the performer may send input");
        return;
    }
    const auto& tc = config_.tracker;
    switch (msg.type) {
    case Type::NoteOn:
        input_.submit(MidiEvent::note_on(msg.pitch, msg.velocity, 0.0));
        break;
    case Type::NoteOff:
        input_.submit(MidiEvent::note_off(msg.pitch, 0.0));
        break;
    case Type::Pedal:
        input_.submit(MidiEvent::control(msg.pedal == Pedal::Sustain ? tc.sustain_controller : tc.soft_controller,
                                         msg.down ? 127 : 0, 0.0));
        break;
    case Type::Takeover:
    case Type::Reclaim: {
        const Phase want = msg.type == Type::Takeover ? Phase::Listen : Phase::Generating;
        if (phase() != want) {
            reply(id, "error",
                  fmt::format("{} ignored while {}", msg.type == Type::Takeover ? "takeover" : "reclaim",
                              to_string(phase())));
            return;
        }
        input_.submit(MidiEvent::control(tc.soft_controller, 127, 0.0));
        input_.submit(MidiEvent::control(tc.soft_controller, 0, 0.0));
        break;
    }
    default:
        break;
    }
}

std::string GatewayCore::record_locked(const std::string& type, double t_ms, const std::string& body) {
    const auto seq = ++seq_;
    if (body.empty()) {
        return fmt::format("{} {} {:.3f}", type, seq, t_ms);
    }
    return fmt::format("{} {} {:.3f} {}", type, seq, t_ms, body);
}

void GatewayCore::push_locked(ClientId id, Client& c, std::string payload, std::vector<ClientId>& woke) {
    c.outbox.push_back(std::move(payload));
    while (c.outbox.size() > config_.outbox_limit) {
        c.outbox.pop_front();
        ++c.dropped;
    }
    woke.push_back(id);
}

void GatewayCore::wake(const std::vector<ClientId>& ids) {
    std::function<void(ClientId)> fn;
    {
        std::lock_guard lock(mutex_);
        fn = notify_;
    }
    if (fn) {
        for (auto id : ids) {
            fn(id);
        }
    }
}

void GatewayCore::broadcast(const std::string& type, double t_ms, const std::string& body) {
    std::vector<ClientId> woke;
    {
        std::lock_guard lock(mutex_);
        const auto rec = record_locked(type, t_ms, body);
        for (auto& [id, c] : clients_) {
            push_locked(id, c, rec, woke);
        }
    }
    wake(woke);
}

void GatewayCore::reply(ClientId id, const std::string& type, const std::string& body) {
    std::vector<ClientId> woke;
    {
        std::lock_guard lock(mutex_);
        auto it = clients_.find(id);
        if (it == clients_.end()) {
            return;
        }
        push_locked(id, it->second, record_locked(type, clock_.now_ms(), body), woke);
    }
    wake(woke);
}

std::string GatewayCore::take_output(ClientId id) {
    std::lock_guard lock(mutex_);
    auto it = clients_.find(id);
    if (it == clients_.end()) {
        return {};
    }
    auto& c = it->second;
    std::string out;
    if (c.dropped > 0) {
        out += gw::frame(record_locked("gap", clock_.now_ms(), std::to_string(c.dropped)));
        c.dropped = 0;
    }
    for (const auto& p : c.outbox) {
        out += gw::frame(p);
    }
    c.outbox.clear();
    return out;
}

bool GatewayCore::has_output(ClientId id) const {
    std::lock_guard lock(mutex_);
    auto it = clients_.find(id);
    return it != clients_.end() && (!it->second.outbox.empty() || it->second.dropped > 0);
}

void GatewayCore::heartbeat() {
    broadcast("heartbeat", clock_.now_ms(), "");
}

std::optional<GatewayCore::ClientId> GatewayCore::performer() const {
    std::lock_guard lock(mutex_);
    return performer_;
}

GatewayCore::Role GatewayCore::role(ClientId id) const {
    std::lock_guard lock(mutex_);
    auto it = clients_.find(id);
    return it == clients_.end() ? Role::Observer : it->second.role;
}

Phase GatewayCore::phase() const {
    std::lock_guard lock(mutex_);
    return phase_;
}

std::size_t GatewayCore::clients() const {
    std::lock_guard lock(mutex_);
    return clients_.size();
}

void GatewayCore::on_transition(Phase from, Phase to, double t_ms, const std::string& reason) {
    {
        std::lock_guard lock(mutex_);
        phase_ = to;
    }
    broadcast("state", t_ms, fmt::format("{} {} {}", to_string(to), to_string(from), reason));
}

void GatewayCore::on_report(const TakeoverReport& r) {
    broadcast("takeover_report", clock_.now_ms(),
              fmt::format("{} {:.3f} {:.3f} {} {} {} {} {} {} {} {}", r.turn, r.signal_time_ms, r.finalize_ms,
                          opt_ms(r.first_token_ms), opt_ms(r.first_note_sound_ms), r.hanging_count,
                          r.residual_tokens, r.context_tokens, r.notes_scheduled, r.policy, r.strategy));
}

void GatewayCore::on_error(const std::string& text, double t_ms) {
    broadcast("error", t_ms, text);
}

void GatewayCore::on_human_event(const MidiEvent& ev) {
    const char* kind = ev.kind == MidiKind::NoteOn ? "note_on" : ev.kind == MidiKind::NoteOff ? "note_off" : "control";
    const bool note = ev.is_note();
    broadcast("human_note", ev.timestamp_ms,
              fmt::format("{} {} {}", kind, note ? ev.pitch : ev.controller, note ? ev.velocity : ev.value));
}

void GatewayCore::on_ai_note(const AiNoteInfo& info) {
    const bool dropped = info.status == AiNoteInfo::Status::Dropped;
    broadcast(dropped ? "dropped_note" : "ai_note", clock_.now_ms(),
              fmt::format("{} {} {} {} {:.3f} {:.3f} {} {}", info.note_id, info.turn, info.pitch, info.velocity,
                          info.target_on_ms, info.target_off_ms, status_name(info.status), opt_ms(info.sounded_ms)));
}

} // namespace duet
