#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "duet/midi_event.hpp"

namespace duet {

struct TokenizerConfig {
    int time_resolution_ms = 10;
    int segment_ms = 5000;
    int velocity_buckets = 16;
    int max_duration_ms = 10000;

    // Throws std::invalid_argument unless all fields are positive, the segment
    // and maximum duration are multiples of the resolution, and
    // velocity_buckets <= 127 (every bucket then holds a valid velocity).
    void validate() const;

    int offsets_per_segment() const { return segment_ms / time_resolution_ms; }
    int duration_steps() const { return max_duration_ms / time_resolution_ms; }

    friend bool operator==(const TokenizerConfig&, const TokenizerConfig&) = default;
};

// Nearest grid multiple, ties rounded up.
std::int64_t quantize_time(double t_ms, const TokenizerConfig& config);

// Equal-width bucket over 0..127: floor(v * buckets / 128).
int quantize_velocity(int velocity, const TokenizerConfig& config);

// Velocity that stands for a bucket after detokenization; it maps back to the
// same bucket.
int bucket_velocity(int bucket, const TokenizerConfig& config);

// Quantized duration clamped to [resolution, max_duration_ms].
std::int64_t quantize_duration(double duration_ms, const TokenizerConfig& config);

enum class TokenKind : std::uint8_t { Start, End, Segment, Note, Onset, Duration, PedalOn, PedalOff };

struct Token {
    TokenKind kind = TokenKind::Start;
    int a = 0; // Note: pitch; Onset / PedalOn / PedalOff: offset in segment; Duration: ms
    int b = 0; // Note: velocity bucket

    static Token start() { return {TokenKind::Start, 0, 0}; }
    static Token end() { return {TokenKind::End, 0, 0}; }
    static Token segment() { return {TokenKind::Segment, 0, 0}; }
    static Token note(int pitch, int bucket) { return {TokenKind::Note, pitch, bucket}; }
    static Token onset(int offset_ms) { return {TokenKind::Onset, offset_ms, 0}; }
    static Token duration(int ms) { return {TokenKind::Duration, ms, 0}; }
    static Token pedal_on(int offset_ms) { return {TokenKind::PedalOn, offset_ms, 0}; }
    static Token pedal_off(int offset_ms) { return {TokenKind::PedalOff, offset_ms, 0}; }

    friend bool operator==(const Token&, const Token&) = default;
};

using TokenSeq = std::vector<Token>;

class StructuralError : public std::runtime_error {
public:
    StructuralError(const std::string& what, std::size_t index);
    std::size_t index() const { return index_; }

private:
    std::size_t index_;
};

// A performance: closed notes plus pedal events.
struct Performance {
    std::vector<Note> notes;
    std::vector<PedalEvent> pedals;

    friend bool operator==(const Performance&, const Performance&) = default;
};

// One tokenizable event after quantization. Events are tokenized in ascending
// key() order; two events with equal keys produce identical tokens, except
// pedals, which keep their arrival order through `seq`.
struct CanonicalEvent {
    enum class Kind : std::uint8_t { Pedal = 0, Note = 1 };

    Kind kind = Kind::Note;
    std::int64_t time = 0; // quantized absolute ms
    int pitch = 0;
    int bucket = 0;
    std::int64_t duration = 0;
    bool pedal_on = false;
    std::uint64_t seq = 0;

    auto key() const { return std::tuple(time, static_cast<int>(kind), pitch, bucket, duration, seq); }
    friend bool operator<(const CanonicalEvent& x, const CanonicalEvent& y) { return x.key() < y.key(); }
    friend bool operator==(const CanonicalEvent&, const CanonicalEvent&) = default;
};

CanonicalEvent canonical_note(const Note& note, const TokenizerConfig& config);
CanonicalEvent canonical_pedal(const PedalEvent& pedal, std::uint64_t seq, const TokenizerConfig& config);

// Incremental encoder. Events must arrive in non-decreasing key order; each
// event appends its tokens (preceded by any SegmentToks crossed). Tokenizing a
// prefix of an event list therefore yields a prefix of the full token stream.
class TokenStreamBuilder {
public:
    explicit TokenStreamBuilder(TokenizerConfig config, std::int64_t origin_ms = 0);

    void start(TokenSeq& out);
    void append(const CanonicalEvent& ev, TokenSeq& out);

    // Two-phase note encoding for notes whose duration is decided after their
    // onset tokens are emitted.
    void begin_note(std::int64_t time, int pitch, int bucket, TokenSeq& out);
    void end_note(std::int64_t duration, TokenSeq& out);

    std::int64_t origin_ms() const { return origin_; }
    std::int64_t segment_index() const { return segment_; }
    int cursor() const { return cursor_; }
    std::size_t events_encoded() const { return events_encoded_; }
    std::optional<CanonicalEvent> last() const { return last_; }

private:
    int advance_to(std::int64_t time, TokenSeq& out);

    TokenizerConfig config_;
    std::int64_t origin_;
    std::int64_t segment_ = 0;
    int cursor_ = 0;
    bool note_open_ = false;
    std::size_t events_encoded_ = 0;
    std::optional<CanonicalEvent> last_;
};

// Canonical, quantized, sorted events of a performance (sustain pedal only).
// Throws std::invalid_argument on open notes.
std::vector<CanonicalEvent> canonical_events(const Performance& perf, const TokenizerConfig& config);

// Tokenize a closed performance: [Start, events...]. Soft-pedal events carry
// no tokens.
TokenSeq tokenize(const std::vector<Note>& notes, const std::vector<PedalEvent>& pedals,
                  const TokenizerConfig& config);

// Exact inverse of tokenize on quantized data.
Performance detokenize(const TokenSeq& seq, const TokenizerConfig& config);

// What tokenize-then-detokenize yields for a performance.
Performance quantize(const Performance& perf, const TokenizerConfig& config);

// Streaming decoder for generated tokens. Errors leave the decoder ready for
// the next NoteTok / pedal token.
class Detokenizer {
public:
    struct DecodedNote {
        Note note;
    };
    struct DecodedPedal {
        PedalEvent pedal;
    };
    struct Malformed {
        std::size_t index;
        std::string what;
    };
    struct Finished {};
    using Output = std::variant<std::monostate, DecodedNote, DecodedPedal, Malformed, Finished>;

    explicit Detokenizer(TokenizerConfig config, std::int64_t origin_ms = 0, std::int64_t segment = 0,
                         int cursor = 0, bool expect_start = false);

    Output feed(const Token& tok);

    std::int64_t segment_index() const { return segment_; }
    std::size_t consumed() const { return index_; }

private:
    Output malformed(const std::string& what);

    TokenizerConfig config_;
    std::int64_t origin_;
    std::int64_t segment_;
    int cursor_;
    bool expect_start_;
    enum class Expect { Event, Onset, Duration } expect_ = Expect::Event;
    int pending_pitch_ = 0;
    int pending_bucket_ = 0;
    int pending_offset_ = 0;
    std::size_t index_ = 0;
};

// Plain-text dump, one token per line: `KIND value [value]`.
std::string dump_tokens(const TokenSeq& seq);
TokenSeq parse_token_dump(const std::string& text);

using TokenId = std::uint32_t;

// Dense integer ids for a TokenizerConfig:
//   0 START, 1 END, 2 SEGMENT, then NOTE (pitch*buckets + bucket),
//   ONSET (offset/res), DUR (ms/res - 1), PEDAL_ON, PEDAL_OFF (offset/res).
class Vocabulary {
public:
    explicit Vocabulary(TokenizerConfig config);

    std::size_t size() const { return size_; }
    const std::string& descriptor() const { return descriptor_; }
    const TokenizerConfig& config() const { return config_; }

    TokenId id(const Token& tok) const; // std::out_of_range when not representable
    Token token(TokenId id) const;      // std::out_of_range for unknown ids
    bool contains(const Token& tok) const;

    std::vector<TokenId> ids(std::span<const Token> toks) const;
    TokenSeq tokens(std::span<const TokenId> ids) const;

    TokenId note_base() const { return note_base_; }
    TokenId onset_base() const { return onset_base_; }
    TokenId duration_base() const { return duration_base_; }
    TokenId pedal_on_base() const { return pedal_on_base_; }
    TokenId pedal_off_base() const { return pedal_off_base_; }

private:
    TokenizerConfig config_;
    std::string descriptor_;
    TokenId note_base_ = 3;
    TokenId onset_base_ = 0;
    TokenId duration_base_ = 0;
    TokenId pedal_on_base_ = 0;
    TokenId pedal_off_base_ = 0;
    std::size_t size_ = 0;
};

const char* to_string(TokenKind kind);

} // namespace duet
