#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "duet/midi_event.hpp"

namespace duet {

struct TrackerConfig {
    int sustain_controller = 64;
    int soft_controller = 67;
    int pedal_threshold = 64; // value >= threshold means pressed
};

struct FinalizedNote {
    Note note;
};

struct PedalChange {
    PedalEvent event;
};

struct TakeoverSignal {
    double time_ms = 0.0;
};

using TrackerEmission = std::variant<FinalizedNote, PedalChange, TakeoverSignal>;

class SequencingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct OpenNote {
    double onset_ms = 0.0;
    int velocity = 0;
};

// Value snapshot of the tracker. Copies are independent.
struct TrackerState {
    std::array<std::optional<OpenNote>, 128> open_notes{};
    bool sustain_down = false;
    bool soft_down = false;
    std::vector<Note> finalized; // sorted by onset
    std::vector<PedalEvent> pedal_log;
    std::optional<double> last_timestamp_ms;
    std::size_t notes_seen = 0; // NoteOns ingested or notes merged
};

// Single-writer live note tracker.
class NoteTracker {
public:
    explicit NoteTracker(TrackerConfig config = {});

    // Throws SequencingError when ev is older than the last ingested event.
    std::vector<TrackerEmission> ingest(const MidiEvent& ev);

    // Open notes ordered by onset (then pitch). Notes opened after at_ms are
    // excluded.
    std::vector<Note> hanging_notes(double at_ms) const;

    // Finalizes an open note with a chosen duration. Used when hanging notes
    // receive speculative durations; a later NoteOff for the pitch is ignored.
    Note close_open(int pitch, double duration_ms);

    // Inserts an externally produced closed note (e.g. a sounded generated note).
    void merge_finalized(const Note& note);

    const TrackerState& state() const { return state_; }
    const TrackerConfig& config() const { return config_; }
    const std::vector<Note>& finalized() const { return state_.finalized; }
    const std::vector<PedalEvent>& pedal_log() const { return state_.pedal_log; }
    bool any_note_played() const { return state_.notes_seen > 0; }
    std::optional<double> earliest_open_onset() const;
    std::size_t diagnostics() const { return diagnostics_; }

private:
    void insert_finalized(const Note& note);
    void diagnose(const char* what, const MidiEvent& ev);

    TrackerConfig config_;
    TrackerState state_;
    std::size_t diagnostics_ = 0;
};

} // namespace duet
