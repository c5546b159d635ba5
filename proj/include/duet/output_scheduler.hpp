#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "duet/calibration.hpp"
#include "duet/midi_event.hpp"

namespace duet {

struct SchedulerConfig {
    double staleness_threshold_ms = 30.0;
    double retrigger_gap_ms = 60.0;
    std::size_t max_pending = 4096;
    double note_off_latency_ms = 0.0; // subtracted from NoteOff send times
    double tick_quantum_ms = 1.0;

    void validate() const;
};

class Backpressure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class EventState : std::uint8_t { Pending, Sent, Dropped };

struct ScheduledEvent {
    std::uint64_t seq = 0;
    std::uint64_t note_id = 0; // 0 for controls
    std::uint32_t tag = 0;
    MidiEvent payload;
    double requested_target_ms = 0.0; // target asked for by the caller
    double target_sound_ms = 0.0;     // after any retrigger delay
    double send_ms = 0.0;
    std::optional<double> sent_at_ms;
    EventState state = EventState::Pending;
};

struct Emission {
    MidiEvent event; // timestamped with the tick time
    std::uint64_t note_id = 0;
    std::uint32_t tag = 0;
    double send_ms = 0.0;
    double target_sound_ms = 0.0;
};

struct DroppedNote {
    std::uint64_t note_id = 0;
    std::uint32_t tag = 0;
    int pitch = 0;
    int velocity = 0;
    double target_sound_ms = 0.0;
    bool stale = false; // false: cancelled
};

struct TickOutput {
    std::vector<Emission> emitted;
    std::vector<DroppedNote> dropped;
};

// Latency-compensating output queue. Owned by one activity.
class OutputScheduler {
public:
    OutputScheduler(SchedulerConfig config, CalibrationTable table);

    // Returns the note id. Throws Backpressure when the queue is full and
    // std::invalid_argument unless target_off > target_on.
    std::uint64_t schedule_note(int pitch, int velocity, double target_on_ms, double target_off_ms,
                                std::uint32_t tag = 0);

    // Controls are sent at their target (no compensation) and never go stale.
    void schedule_control(int controller, int value, double target_ms, std::uint32_t tag = 0);

    TickOutput tick(double now_ms);

    // Drops matching pending events. A NoteOff whose NoteOn was already sent
    // is kept; a NoteOn dropped here takes its NoteOff with it. Returns the
    // number of events dropped; dropped notes are reported by the next tick.
    std::size_t cancel(const std::function<bool(const ScheduledEvent&)>& pred);

    // Moves pending NoteOffs of sounding notes that match `pred` to now.
    std::size_t hurry_offs(double now_ms, const std::function<bool(const ScheduledEvent&)>& pred);

    std::size_t pending() const { return pending_.size(); }
    std::size_t pending_notes_on() const;
    const ScheduledEvent* find(std::uint64_t seq) const;
    const SchedulerConfig& config() const { return config_; }
    const CalibrationTable& table() const { return table_; }
    std::optional<double> next_send_ms() const;
    double last_tick_ms() const { return last_tick_; }

    // Every emission since construction (capped), in emission order.
    const std::deque<Emission>& history() const { return history_; }
    void set_history_limit(std::size_t n) { history_limit_ = n; }

private:
    struct NoteRec {
        std::uint64_t on_seq = 0;
        std::uint64_t off_seq = 0;
        int pitch = 0;
    };

    ScheduledEvent& ev(std::uint64_t seq) { return events_.at(seq); }
    std::uint64_t push(ScheduledEvent e);
    void drop_note(std::uint64_t note_id, bool stale);
    void retire(std::uint64_t seq);

    SchedulerConfig config_;
    CalibrationTable table_;
    std::unordered_map<std::uint64_t, ScheduledEvent> events_; // pending ones, plus sent NoteOns with pending offs
    std::vector<std::uint64_t> pending_;
    std::unordered_map<std::uint64_t, NoteRec> notes_; // unresolved notes
    std::unordered_map<int, std::vector<std::uint64_t>> open_by_pitch_;
    std::array<std::optional<double>, 128> last_off_emit_{};
    std::vector<DroppedNote> dropped_backlog_;
    std::deque<Emission> history_;
    std::size_t history_limit_ = 1u << 20;
    std::uint64_t next_seq_ = 1;
    std::uint64_t next_note_ = 1;
    double last_tick_ = -1e300;
};

} // namespace duet
