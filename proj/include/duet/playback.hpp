#pragma once

#include <cstdint>
#include <cstdio>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/clock.hpp"
#include "duet/output_scheduler.hpp"
#include "duet/virtual_disklavier.hpp"

namespace duet {

// What the engine learns back about a generated note.
struct PlaybackFeedback {
    enum class Kind : std::uint8_t { Sounded, Released, Dropped } kind = Kind::Sounded;
    std::uint64_t note_id = 0;
    double time_ms = 0.0;
};

// Engine-facing side of the output activity.
class PlaybackPort {
public:
    virtual ~PlaybackPort() = default;
    virtual std::uint64_t play_note(int pitch, int velocity, double on_ms, double off_ms, std::uint32_t turn) = 0;
    virtual void play_control(int controller, int value, double at_ms, std::uint32_t turn) = 0;
    // Cancels unsent events of a turn. With cut_sounding, keys already down
    // are released now instead of at their scheduled NoteOff.
    virtual void cancel_turn(std::uint32_t turn, bool cut_sounding, double now_ms) = 0;
};

// Where emitted MIDI goes. Returns acoustic confirmations when the target can
// report them.
class OutputSink {
public:
    virtual ~OutputSink() = default;
    virtual std::vector<AcousticEvent> send(const MidiEvent& ev, double now_ms) = 0;
    virtual bool confirms() const = 0;
};

class VirtualInstrumentSink : public OutputSink {
public:
    explicit VirtualInstrumentSink(VirtualDisklavier& instrument) : instrument_(instrument) {}
    std::vector<AcousticEvent> send(const MidiEvent& ev, double now_ms) override;
    bool confirms() const override { return true; }

private:
    VirtualDisklavier& instrument_;
};

// Raw MIDI byte stream, e.g. /dev/snd/midiC1D0. No confirmations.
class MidiDeviceSink : public OutputSink {
public:
    MidiDeviceSink(const std::string& path, int channel = 0);
    ~MidiDeviceSink() override;
    std::vector<AcousticEvent> send(const MidiEvent& ev, double now_ms) override;
    bool confirms() const override { return false; }

private:
    int fd_ = -1;
    int channel_;
};

// Scheduler plus sink. Emissions are tracked per note so acoustic
// confirmations (or, without them, estimates from the calibration table)
// come back as PlaybackFeedback once their time has come.
class PlaybackHost : public PlaybackPort {
public:
    PlaybackHost(OutputScheduler& scheduler, OutputSink& sink);

    std::uint64_t play_note(int pitch, int velocity, double on_ms, double off_ms, std::uint32_t turn) override;
    void play_control(int controller, int value, double at_ms, std::uint32_t turn) override;
    void cancel_turn(std::uint32_t turn, bool cut_sounding, double now_ms) override;

    // play_note under an id chosen by the caller (ids must be unique). A
    // refused note comes back as Dropped feedback.
    void play_note_as(std::uint64_t id, int pitch, int velocity, double on_ms, double off_ms, std::uint32_t turn);

    // Emits due events and returns feedback whose time is <= now.
    std::vector<PlaybackFeedback> tick(double now_ms);

    OutputScheduler& scheduler() { return scheduler_; }
    const std::vector<Emission>& emitted() const { return emitted_; }
    std::size_t sustain_down_turn_count() const { return sustain_turns_.size(); }

private:
    OutputScheduler& scheduler_;
    OutputSink& sink_;
    std::vector<Emission> emitted_;
    std::vector<PlaybackFeedback> future_; // not yet due, sorted by time
    std::unordered_map<std::uint32_t, bool> sustain_turns_;
    std::unordered_map<std::uint64_t, std::uint64_t> ids_; // scheduler note id -> caller id
    std::uint64_t next_id_ = 1;
    void add_feedback(PlaybackFeedback fb);
};

// PlaybackPort that queues commands stamped with the caller's clock. The
// output activity applies them in order before each tick, so nothing takes
// effect earlier than it was issued. Thread-safe.
class QueuedPlayback : public PlaybackPort {
public:
    explicit QueuedPlayback(const Clock& clock) : clock_(clock) {}

    std::uint64_t play_note(int pitch, int velocity, double on_ms, double off_ms, std::uint32_t turn) override;
    void play_control(int controller, int value, double at_ms, std::uint32_t turn) override;
    void cancel_turn(std::uint32_t turn, bool cut_sounding, double now_ms) override;

    // Applies commands stamped at or before t_ms.
    void apply_until(double t_ms, PlaybackHost& host);
    bool empty() const;

private:
    struct Command {
        enum class Kind : std::uint8_t { Note, Control, Cancel } kind = Kind::Note;
        double stamp = 0.0;
        std::uint64_t id = 0;
        int a = 0;
        int b = 0;
        double t1 = 0.0;
        double t2 = 0.0;
        std::uint32_t turn = 0;
        bool flag = false;
    };

    const Clock& clock_;
    mutable std::mutex mutex_;
    std::deque<Command> queue_;
    std::uint64_t next_id_ = 1;
};

} // namespace duet
