#include "duet/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <spdlog/spdlog.h>

namespace duet {

void TokenizerConfig::validate() const {
    if (time_resolution_ms <= 0 || segment_ms <= 0 || velocity_buckets <= 0 || max_duration_ms <= 0) {
        throw std::invalid_argument("tokenizer config: all fields must be positive");
    }
    if (segment_ms % time_resolution_ms != 0) {
        throw std::invalid_argument("tokenizer config: segment_ms must be a multiple of time_resolution_ms");
    }
    if (max_duration_ms % time_resolution_ms != 0) {
        throw std::invalid_argument("tokenizer config: max_duration_ms must be a multiple of time_resolution_ms");
    }
    if (velocity_buckets > 127) {
        throw std::invalid_argument("tokenizer config: velocity_buckets must be <= 127");
    }
}

std::int64_t quantize_time(double t_ms, const TokenizerConfig& config) {
    const double res = config.time_resolution_ms;
    return static_cast<std::int64_t>(std::floor(t_ms / res + 0.5)) * config.time_resolution_ms;
}

int quantize_velocity(int velocity, const TokenizerConfig& config) {
    const int v = std::clamp(velocity, 0, 127);
    return v * config.velocity_buckets / 128;
}

int bucket_velocity(int bucket, const TokenizerConfig& config) {
    const int n = config.velocity_buckets;
    const int lo = std::max(1, (bucket * 128 + n - 1) / n);
    const int hi = std::min(127, ((bucket + 1) * 128 + n - 1) / n - 1);
    const int center = ((2 * bucket + 1) * 128) / (2 * n);
    return std::clamp(center, lo, hi);
}

std::int64_t quantize_duration(double duration_ms, const TokenizerConfig& config) {
    const std::int64_t q = quantize_time(duration_ms, config);
    if (q > config.max_duration_ms) {
        spdlog::debug("tokenizer: duration {:.1f}ms clamped to {}ms", duration_ms, config.max_duration_ms);
        return config.max_duration_ms;
    }
    return std::max<std::int64_t>(q, config.time_resolution_ms);
}

StructuralError::StructuralError(const std::string& what, std::size_t index)
    : std::runtime_error("token " + std::to_string(index) + ": " + what), index_(index) {}

CanonicalEvent canonical_note(const Note& note, const TokenizerConfig& config) {
    if (note.is_open()) {
        throw std::invalid_argument("tokenize: note " + std::to_string(note.pitch) + " at " +
                                    std::to_string(note.onset_ms) + "ms is still open");
    }
    CanonicalEvent ev;
    ev.kind = CanonicalEvent::Kind::Note;
    ev.time = quantize_time(note.onset_ms, config);
    ev.pitch = note.pitch;
    ev.bucket = quantize_velocity(note.velocity, config);
    ev.duration = quantize_duration(*note.duration_ms, config);
    return ev;
}

CanonicalEvent canonical_pedal(const PedalEvent& pedal, std::uint64_t seq, const TokenizerConfig& config) {
    CanonicalEvent ev;
    ev.kind = CanonicalEvent::Kind::Pedal;
    ev.time = quantize_time(pedal.time_ms, config);
    ev.pedal_on = pedal.state == PedalState::On;
    ev.seq = seq;
    return ev;
}

// ---------------------------------------------------------------------------

TokenStreamBuilder::TokenStreamBuilder(TokenizerConfig config, std::int64_t origin_ms)
    : config_(config), origin_(origin_ms) {
    config_.validate();
    if (origin_ms % config_.segment_ms != 0) {
        throw std::invalid_argument("token stream origin must sit on a segment boundary");
    }
}

void TokenStreamBuilder::start(TokenSeq& out) {
    out.push_back(Token::start());
}

int TokenStreamBuilder::advance_to(std::int64_t time, TokenSeq& out) {
    const std::int64_t rel = time - origin_;
    if (rel < 0) {
        throw std::invalid_argument("token stream: event precedes origin");
    }
    const std::int64_t seg = rel / config_.segment_ms;
    if (seg < segment_) {
        throw std::logic_error("token stream: event out of order");
    }
    while (segment_ < seg) {
        out.push_back(Token::segment());
        ++segment_;
        cursor_ = 0;
    }
    const int offset = static_cast<int>(rel - seg * config_.segment_ms);
    if (offset < cursor_) {
        throw std::logic_error("token stream: event out of order");
    }
    cursor_ = offset;
    return offset;
}

void TokenStreamBuilder::append(const CanonicalEvent& ev, TokenSeq& out) {
    if (note_open_) {
        throw std::logic_error("token stream: append while a note awaits its duration");
    }
    if (last_ && ev < *last_) {
        throw std::logic_error("token stream: events must arrive in canonical order");
    }
    const int offset = advance_to(ev.time, out);
    if (ev.kind == CanonicalEvent::Kind::Pedal) {
        out.push_back(ev.pedal_on ? Token::pedal_on(offset) : Token::pedal_off(offset));
    } else {
        out.push_back(Token::note(ev.pitch, ev.bucket));
        out.push_back(Token::onset(offset));
        out.push_back(Token::duration(static_cast<int>(ev.duration)));
    }
    last_ = ev;
    ++events_encoded_;
}

void TokenStreamBuilder::begin_note(std::int64_t time, int pitch, int bucket, TokenSeq& out) {
    if (note_open_) {
        throw std::logic_error("token stream: nested begin_note");
    }
    CanonicalEvent probe;
    probe.time = time;
    probe.pitch = pitch;
    probe.bucket = bucket;
    probe.duration = std::numeric_limits<std::int64_t>::max();
    if (last_ && probe < *last_) {
        throw std::logic_error("token stream: events must arrive in canonical order");
    }
    const int offset = advance_to(time, out);
    out.push_back(Token::note(pitch, bucket));
    out.push_back(Token::onset(offset));
    note_open_ = true;
    last_ = probe;
}

void TokenStreamBuilder::end_note(std::int64_t duration, TokenSeq& out) {
    if (!note_open_) {
        throw std::logic_error("token stream: end_note without begin_note");
    }
    out.push_back(Token::duration(static_cast<int>(duration)));
    last_->duration = duration;
    note_open_ = false;
    ++events_encoded_;
}

// ---------------------------------------------------------------------------

std::vector<CanonicalEvent> canonical_events(const Performance& perf, const TokenizerConfig& config) {
    std::vector<CanonicalEvent> events;
    events.reserve(perf.notes.size() + perf.pedals.size());
    std::uint64_t seq = 0;
    for (const auto& p : perf.pedals) {
        if (p.pedal == Pedal::Sustain) {
            events.push_back(canonical_pedal(p, seq++, config));
        }
    }
    for (const auto& n : perf.notes) {
        events.push_back(canonical_note(n, config));
    }
    std::stable_sort(events.begin(), events.end());
    return events;
}

TokenSeq tokenize(const std::vector<Note>& notes, const std::vector<PedalEvent>& pedals,
                  const TokenizerConfig& config) {
    const auto events = canonical_events(Performance{notes, pedals}, config);
    TokenStreamBuilder builder(config);
    TokenSeq out;
    out.reserve(1 + events.size() * 3);
    builder.start(out);
    for (const auto& ev : events) {
        builder.append(ev, out);
    }
    return out;
}

Performance quantize(const Performance& perf, const TokenizerConfig& config) {
    Performance out;
    for (const auto& ev : canonical_events(perf, config)) {
        if (ev.kind == CanonicalEvent::Kind::Pedal) {
            out.pedals.push_back(PedalEvent{Pedal::Sustain, ev.pedal_on ? PedalState::On : PedalState::Off,
                                            static_cast<double>(ev.time)});
        } else {
            out.notes.push_back(Note{ev.pitch, static_cast<double>(ev.time), static_cast<double>(ev.duration),
                                     bucket_velocity(ev.bucket, config)});
        }
    }
    return out;
}

Performance detokenize(const TokenSeq& seq, const TokenizerConfig& config) {
    Detokenizer dec(config, 0, 0, 0, true);
    Performance out;
    for (const Token& tok : seq) {
        const auto r = dec.feed(tok);
        if (const auto* note = std::get_if<Detokenizer::DecodedNote>(&r)) {
            out.notes.push_back(note->note);
        } else if (const auto* pedal = std::get_if<Detokenizer::DecodedPedal>(&r)) {
            out.pedals.push_back(pedal->pedal);
        } else if (const auto* bad = std::get_if<Detokenizer::Malformed>(&r)) {
            throw StructuralError(bad->what, bad->index);
        } else if (std::holds_alternative<Detokenizer::Finished>(r)) {
            break;
        }
    }
    if (dec.consumed() > 0) {
        // A triple cut short at the end of the sequence is malformed too.
        const Token& last = seq[dec.consumed() - 1];
        if (last.kind == TokenKind::Note || last.kind == TokenKind::Onset) {
            throw StructuralError("NoteTok without DurTok", dec.consumed() - 1);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

Detokenizer::Detokenizer(TokenizerConfig config, std::int64_t origin_ms, std::int64_t segment, int cursor,
                         bool expect_start)
    : config_(config), origin_(origin_ms), segment_(segment), cursor_(cursor), expect_start_(expect_start) {
    config_.validate();
}

Detokenizer::Output Detokenizer::malformed(const std::string& what) {
    expect_ = Expect::Event;
    return Malformed{index_ - 1, what};
}

Detokenizer::Output Detokenizer::feed(const Token& tok) {
    ++index_;
    const int res = config_.time_resolution_ms;
    auto valid_offset = [&](int off) { return off >= 0 && off < config_.segment_ms && off % res == 0; };

    if (expect_start_) {
        expect_start_ = false;
        if (tok.kind != TokenKind::Start) {
            return malformed("sequence must begin with START");
        }
        return std::monostate{};
    }

    switch (tok.kind) {
    case TokenKind::Start:
        return malformed("START inside sequence");
    case TokenKind::End:
        if (expect_ != Expect::Event) {
            return malformed("END inside a note triple");
        }
        return Finished{};
    case TokenKind::Segment:
        if (expect_ != Expect::Event) {
            return malformed("SEGMENT inside a note triple");
        }
        ++segment_;
        cursor_ = 0;
        return std::monostate{};
    case TokenKind::Note:
        if (expect_ != Expect::Event) {
            return malformed("NoteTok without DurTok");
        }
        if (tok.a < 0 || tok.a > 127 || tok.b < 0 || tok.b >= config_.velocity_buckets) {
            return malformed("NoteTok out of range");
        }
        pending_pitch_ = tok.a;
        pending_bucket_ = tok.b;
        expect_ = Expect::Onset;
        return std::monostate{};
    case TokenKind::Onset:
        if (expect_ != Expect::Onset) {
            return malformed("OnsetTok not preceded by NoteTok");
        }
        if (!valid_offset(tok.a) || tok.a < cursor_) {
            return malformed("OnsetTok offset invalid or decreasing");
        }
        pending_offset_ = tok.a;
        cursor_ = tok.a;
        expect_ = Expect::Duration;
        return std::monostate{};
    case TokenKind::Duration: {
        if (expect_ != Expect::Duration) {
            return malformed("DurTok not preceded by NoteTok/OnsetTok");
        }
        if (tok.a < res || tok.a > config_.max_duration_ms || tok.a % res != 0) {
            return malformed("DurTok out of range");
        }
        expect_ = Expect::Event;
        const double onset = static_cast<double>(origin_ + segment_ * config_.segment_ms + pending_offset_);
        return DecodedNote{Note{pending_pitch_, onset, static_cast<double>(tok.a),
                                bucket_velocity(pending_bucket_, config_)}};
    }
    case TokenKind::PedalOn:
    case TokenKind::PedalOff: {
        if (expect_ != Expect::Event) {
            return malformed("pedal token inside a note triple");
        }
        if (!valid_offset(tok.a) || tok.a < cursor_) {
            return malformed("pedal offset invalid or decreasing");
        }
        cursor_ = tok.a;
        const double t = static_cast<double>(origin_ + segment_ * config_.segment_ms + tok.a);
        return DecodedPedal{PedalEvent{Pedal::Sustain,
                                       tok.kind == TokenKind::PedalOn ? PedalState::On : PedalState::Off, t}};
    }
    }
    return malformed("unknown token");
}

// ---------------------------------------------------------------------------

const char* to_string(TokenKind kind) {
    switch (kind) {
    case TokenKind::Start:
        return "START";
    case TokenKind::End:
        return "END";
    case TokenKind::Segment:
        return "SEGMENT";
    case TokenKind::Note:
        return "NOTE";
    case TokenKind::Onset:
        return "ONSET";
    case TokenKind::Duration:
        return "DUR";
    case TokenKind::PedalOn:
        return "PEDAL_ON";
    case TokenKind::PedalOff:
        return "PEDAL_OFF";
    }
    return "?";
}

std::string dump_tokens(const TokenSeq& seq) {
    std::ostringstream os;
    for (const Token& t : seq) {
        os << to_string(t.kind);
        switch (t.kind) {
        case TokenKind::Note:
            os << ' ' << t.a << ' ' << t.b;
            break;
        case TokenKind::Onset:
        case TokenKind::Duration:
        case TokenKind::PedalOn:
        case TokenKind::PedalOff:
            os << ' ' << t.a;
            break;
        default:
            break;
        }
        os << '\n';
    }
    return os.str();
}

TokenSeq parse_token_dump(const std::string& text) {
    TokenSeq out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        Token t;
        bool ok = true;
        if (kind == "START") {
            t = Token::start();
        } else if (kind == "END") {
            t = Token::end();
        } else if (kind == "SEGMENT") {
            t = Token::segment();
        } else if (kind == "NOTE") {
            t.kind = TokenKind::Note;
            ok = static_cast<bool>(ls >> t.a >> t.b);
        } else if (kind == "ONSET" || kind == "DUR" || kind == "PEDAL_ON" || kind == "PEDAL_OFF") {
            t.kind = kind == "ONSET"      ? TokenKind::Onset
                     : kind == "DUR"      ? TokenKind::Duration
                     : kind == "PEDAL_ON" ? TokenKind::PedalOn
                                          : TokenKind::PedalOff;
            ok = static_cast<bool>(ls >> t.a);
        } else {
            ok = false;
        }
        if (!ok) {
            throw StructuralError("unparseable dump line '" + line + "'", lineno - 1);
        }
        out.push_back(t);
    }
    return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(TokenizerConfig config) : config_(config) {
    config_.validate();
    const auto offsets = static_cast<TokenId>(config_.offsets_per_segment());
    note_base_ = 3;
    onset_base_ = note_base_ + 128u * static_cast<TokenId>(config_.velocity_buckets);
    duration_base_ = onset_base_ + offsets;
    pedal_on_base_ = duration_base_ + static_cast<TokenId>(config_.duration_steps());
    pedal_off_base_ = pedal_on_base_ + offsets;
    size_ = pedal_off_base_ + offsets;
    descriptor_ = "note-triple/1;res=" + std::to_string(config_.time_resolution_ms) +
                  ";seg=" + std::to_string(config_.segment_ms) + ";vel=" + std::to_string(config_.velocity_buckets) +
                  ";maxdur=" + std::to_string(config_.max_duration_ms);
}

bool Vocabulary::contains(const Token& t) const {
    const int res = config_.time_resolution_ms;
    switch (t.kind) {
    case TokenKind::Start:
    case TokenKind::End:
    case TokenKind::Segment:
        return true;
    case TokenKind::Note:
        return t.a >= 0 && t.a < 128 && t.b >= 0 && t.b < config_.velocity_buckets;
    case TokenKind::Onset:
    case TokenKind::PedalOn:
    case TokenKind::PedalOff:
        return t.a >= 0 && t.a < config_.segment_ms && t.a % res == 0;
    case TokenKind::Duration:
        return t.a >= res && t.a <= config_.max_duration_ms && t.a % res == 0;
    }
    return false;
}

TokenId Vocabulary::id(const Token& t) const {
    if (!contains(t)) {
        throw std::out_of_range(std::string("token not in vocabulary: ") + to_string(t.kind) + " " +
                                std::to_string(t.a));
    }
    const int res = config_.time_resolution_ms;
    switch (t.kind) {
    case TokenKind::Start:
        return 0;
    case TokenKind::End:
        return 1;
    case TokenKind::Segment:
        return 2;
    case TokenKind::Note:
        return note_base_ + static_cast<TokenId>(t.a * config_.velocity_buckets + t.b);
    case TokenKind::Onset:
        return onset_base_ + static_cast<TokenId>(t.a / res);
    case TokenKind::Duration:
        return duration_base_ + static_cast<TokenId>(t.a / res - 1);
    case TokenKind::PedalOn:
        return pedal_on_base_ + static_cast<TokenId>(t.a / res);
    case TokenKind::PedalOff:
        return pedal_off_base_ + static_cast<TokenId>(t.a / res);
    }
    throw std::out_of_range("token kind");
}

Token Vocabulary::token(TokenId id) const {
    const int res = config_.time_resolution_ms;
    if (id >= size_) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size_));
    }
    if (id == 0) {
        return Token::start();
    }
    if (id == 1) {
        return Token::end();
    }
    if (id == 2) {
        return Token::segment();
    }
    if (id < onset_base_) {
        const int k = static_cast<int>(id - note_base_);
        return Token::note(k / config_.velocity_buckets, k % config_.velocity_buckets);
    }
    if (id < duration_base_) {
        return Token::onset(static_cast<int>(id - onset_base_) * res);
    }
    if (id < pedal_on_base_) {
        return Token::duration((static_cast<int>(id - duration_base_) + 1) * res);
    }
    if (id < pedal_off_base_) {
        return Token::pedal_on(static_cast<int>(id - pedal_on_base_) * res);
    }
    return Token::pedal_off(static_cast<int>(id - pedal_off_base_) * res);
}

std::vector<TokenId> Vocabulary::ids(std::span<const Token> toks) const {
    std::vector<TokenId> out;
    out.reserve(toks.size());
    for (const Token& t : toks) {
        out.push_back(id(t));
    }
    return out;
}

TokenSeq Vocabulary::tokens(std::span<const TokenId> ids) const {
    TokenSeq out;
    out.reserve(ids.size());
    for (TokenId i : ids) {
        out.push_back(token(i));
    }
    return out;
}

} // namespace duet
