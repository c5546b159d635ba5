#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "duet/backend.hpp"
#include "duet/clock.hpp"
#include "duet/note_tracker.hpp"
#include "duet/playback.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

enum class SpeculativePolicy : std::uint8_t { Elapsed, ElapsedPlusExtension, ModelPredicted };
enum class ReclaimFlush : std::uint8_t { CutImmediately, FinishSoundingNotes };
enum class PrefillStrategy : std::uint8_t { Continuous, OneShot };
enum class Phase : std::uint8_t { Listen, Finalizing, Generating };

const char* to_string(SpeculativePolicy p);
const char* to_string(ReclaimFlush f);
const char* to_string(PrefillStrategy s);
const char* to_string(Phase p);

struct EngineConfig {
    TokenizerConfig tokenizer;
    TrackerConfig tracker;
    int prefill_chunk_tokens = 64;
    SpeculativePolicy speculative_policy = SpeculativePolicy::ModelPredicted;
    double extension_ms = 500.0;
    int max_context_tokens = 8192;
    SamplingParams sampling;
    ReclaimFlush reclaim_flush = ReclaimFlush::FinishSoundingNotes;
    PrefillStrategy prefill_strategy = PrefillStrategy::Continuous;
    bool key_press_reclaim = false;
    bool allow_empty_context = false;
    // First generated note is due this long after generation starts, so its
    // NoteOn can still be sent ahead of the actuation delay.
    double playback_lead_ms = 150.0;
    // Decoding pauses while scheduled notes reach this far past now.
    double generation_lookahead_ms = 2000.0;
    // How much earlier than its target a generated note may actually sound.
    double ai_onset_tolerance_ms = 50.0;

    void validate() const; // std::invalid_argument
};

// Times are absolute on the session clock.
struct TakeoverReport {
    std::uint32_t turn = 0;
    double signal_time_ms = 0.0;
    double finalize_ms = 0.0;
    std::optional<double> first_token_ms;
    std::optional<double> first_note_sound_ms;
    int hanging_count = 0;
    std::size_t residual_tokens = 0; // prefilled during finalization
    std::size_t context_tokens = 0;  // cache length when generation began
    std::size_t notes_scheduled = 0;
    std::string policy;
    std::string strategy;
};

struct AiNoteInfo {
    enum class Status : std::uint8_t { Scheduled, Sounded, Dropped } status = Status::Scheduled;
    std::uint64_t note_id = 0;
    std::uint32_t turn = 0;
    int pitch = 0;
    int velocity = 0;
    double target_on_ms = 0.0;
    double target_off_ms = 0.0;
    std::optional<double> sounded_ms;
};

class EngineObserver {
public:
    virtual ~EngineObserver() = default;
    virtual void on_transition(Phase, Phase, double /*t_ms*/, const std::string& /*reason*/) {}
    virtual void on_report(const TakeoverReport&) {}
    virtual void on_error(const std::string& /*text*/, double /*t_ms*/) {}
    virtual void on_human_event(const MidiEvent&) {}
    virtual void on_ai_note(const AiNoteInfo&) {}
};

// Forwards every callback to each observer in the order they were added.
class ObserverList : public EngineObserver {
public:
    void add(EngineObserver* obs) { list_.push_back(obs); }

    void on_transition(Phase from, Phase to, double t_ms, const std::string& reason) override;
    void on_report(const TakeoverReport& r) override;
    void on_error(const std::string& text, double t_ms) override;
    void on_human_event(const MidiEvent& ev) override;
    void on_ai_note(const AiNoteInfo& info) override;

private:
    std::vector<EngineObserver*> list_;
};

// One `key=value` line per transition, report and error.
class EventLog : public EngineObserver {
public:
    void on_transition(Phase from, Phase to, double t_ms, const std::string& reason) override;
    void on_report(const TakeoverReport& r) override;
    void on_error(const std::string& text, double t_ms) override;

    const std::vector<std::string>& lines() const { return lines_; }
    std::string text() const;

private:
    std::vector<std::string> lines_;
};

// Input side of a running engine. submit() stamps the event with the
// session clock and returns the stamp.
class EngineInput {
public:
    virtual ~EngineInput() = default;
    virtual double submit(const MidiEvent& ev) = 0;
};

std::string format_report(const TakeoverReport& r);

// Speculative duration for the non-model policies, before quantization.
double speculate_duration(const Note& note, double signal_ms, SpeculativePolicy policy, double extension_ms);

// Turn-taking core. Single-threaded: every call comes from the activity that
// owns the backend session. Events must arrive in timestamp order.
class DuetEngine {
public:
    DuetEngine(EngineConfig config, Backend& backend, PlaybackPort& playback, Clock& clock,
               EngineObserver* observer = nullptr);
    ~DuetEngine();

    void on_event(const MidiEvent& ev);
    void on_feedback(const PlaybackFeedback& fb);

    // Promise from the input side that every event stamped before t has been
    // delivered. Lets the watermark move on while nobody is playing.
    void advance_input_horizon(double t_ms);

    // One unit of work (a prefill chunk, the whole takeover, one decode
    // step). Returns false when there was nothing to do.
    bool poll();

    Phase phase() const { return phase_; }
    const EngineConfig& config() const { return config_; }
    const NoteTracker& tracker() const { return tracker_; }
    const Vocabulary& vocab() const { return vocab_; }

    // Tokens of the shared context currently in the cache (generated tokens
    // excluded; they are rolled back at the end of each turn).
    const TokenSeq& transcript() const { return transcript_; }
    // Encoded but not yet prefilled.
    const TokenSeq& staged() const { return staged_; }
    std::size_t pending_events() const { return pending_.size(); }

    double watermark_ms() const { return watermark_; }
    std::size_t tokens_prefilled() const { return tokens_prefilled_; }
    std::size_t tokens_generated() const { return tokens_generated_; }
    std::size_t events_encoded() const { return events_encoded_; }
    std::size_t rebuilds() const { return rebuilds_; }
    bool degraded() const { return degraded_; }
    std::uint32_t turn() const { return turn_; }
    const std::vector<TakeoverReport>& reports() const { return reports_; }
    std::optional<TakeoverReport> current_report() const { return report_; }

    // Finalized notes plus sustain pedal log, i.e. the performance the
    // context stands for.
    Performance context_performance() const;
    std::int64_t context_origin_ms() const { return builder_.origin_ms(); }
    BackendSession* session() const { return session_.get(); }

private:
    struct AiNote {
        AiNoteInfo info;
        std::optional<double> released_ms;
        bool resolved = false; // merged, dropped or excluded
    };

    void ingest(const MidiEvent& ev);
    void begin_takeover(double t);
    void do_takeover();
    bool listen_step();
    bool generate_step();
    void reclaim(double now, const std::string& reason);
    void end_turn(const std::string& reason, bool cancel);
    void transition(Phase to, const std::string& reason);
    void error(const std::string& text);

    double watermark_candidate() const;
    void enqueue(const CanonicalEvent& ev);
    void encode(const CanonicalEvent& ev);
    void prefill_staged(std::size_t max_tokens);
    void prefill_ids(const TokenSeq& toks);
    void rebuild(std::int64_t origin);
    std::int64_t overflow_origin() const;
    void ensure_session();
    void merge_ai(AiNote& n);
    void finish_report();
    std::int64_t predict_duration(std::int64_t elapsed_q, double elapsed_ms);

    EngineConfig config_;
    Vocabulary vocab_;
    Backend& backend_;
    PlaybackPort& playback_;
    Clock& clock_;
    EngineObserver* observer_;
    std::unique_ptr<BackendSession> session_;

    NoteTracker tracker_;
    Phase phase_ = Phase::Listen;
    TokenStreamBuilder builder_;
    std::vector<CanonicalEvent> pending_; // sorted, not yet encoded
    TokenSeq staged_;
    TokenSeq transcript_;
    std::uint64_t pedal_seq_ = 0;
    double watermark_ = 0.0;
    double last_event_ms_ = 0.0;
    bool needs_rebuild_ = false;
    bool degraded_ = false;
    std::size_t tokens_prefilled_ = 0;
    std::size_t tokens_generated_ = 0;
    std::size_t events_encoded_ = 0;
    std::size_t rebuilds_ = 0;
    std::deque<MidiEvent> deferred_;

    // Current turn.
    std::uint32_t turn_ = 0;
    double signal_ms_ = 0.0;
    std::optional<Mark> gen_mark_;
    std::optional<Detokenizer> gen_decoder_;
    double anchor_ms_ = 0.0;
    double shift_ms_ = 0.0;
    double last_target_ms_ = 0.0;
    int turn_tokens_ = 0;
    bool gen_done_ = false;
    bool ai_sustain_ = false;
    std::optional<TakeoverReport> report_;
    std::vector<TakeoverReport> reports_;
    std::map<std::uint64_t, AiNote> ai_notes_;
};

} // namespace duet
