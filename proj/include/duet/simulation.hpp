#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "duet/calibration.hpp"
#include "duet/engine.hpp"
#include "duet/mock_backend.hpp"
#include "duet/output_scheduler.hpp"
#include "duet/playback.hpp"
#include "duet/virtual_disklavier.hpp"

namespace duet {

struct SimulationSetup {
    EngineConfig engine;
    SchedulerConfig scheduler;
    InstrumentModel instrument;
    // Latency table the scheduler compensates with. Empty: calibrate the
    // virtual instrument first (one probe per velocity).
    std::optional<CalibrationTable> table;
    int calibration_repeats = 1;
    CostModel cost;
    // Real compute time counts as elapsed time (SkippingClock) instead of
    // only the cost model's sleeps (ManualClock).
    bool measured = false;
};

// Discrete-event duet: scripted human input, the engine, and the generated
// part played on the virtual instrument. The engine's playback commands take
// effect at the tick matching the moment they were issued, as they would
// through the output activity's queue.
class DuetSimulation {
public:
    // With backend == nullptr a mock fitted on the bundled corpus is used,
    // paying `setup.cost` on the simulation clock.
    explicit DuetSimulation(SimulationSetup setup, Backend* backend = nullptr);
    ~DuetSimulation();

    // Feeds `script` (sorted by time) and runs until end_ms.
    void run(const std::vector<MidiEvent>& script, double end_ms);
    // Keeps running until the engine is listening and no output is pending,
    // or until limit_ms.
    void settle(double limit_ms);

    void advance(double to_ms); // no input, engine and output keep working

    // Human phrases cut from the bundled pieces alternating with generated
    // turns: phrase, soft-pedal tap, ai_ms of generation, then a second tap
    // if the engine is still generating. Returns the input it delivered.
    std::vector<MidiEvent> play_alternating(int turns, double phrase_ms, double ai_ms, std::uint64_t seed);

    DuetEngine& engine() { return *engine_; }
    VirtualDisklavier& instrument() { return instrument_; }
    OutputScheduler& scheduler() { return *scheduler_; }
    PlaybackHost& host() { return *host_; }
    SteppableClock& clock() { return *clock_; }
    const EventLog& log() const { return log_; }
    MockSession* mock_session() const; // null when an external backend is used
    const CalibrationTable& table() const { return scheduler_->table(); }

    // Optional extra observer (e.g. a gateway). Must outlive the simulation.
    void add_observer(EngineObserver* obs) { fanout_.add(obs); }

    // Deliver one input event now (stamped with the simulation clock).
    void inject(MidiEvent ev);

private:
    void step_once(); // one engine poll plus the ticks it spanned

    SimulationSetup setup_;
    std::unique_ptr<SteppableClock> clock_;
    std::unique_ptr<MockBackend> own_backend_;
    Backend* backend_ = nullptr;
    VirtualDisklavier instrument_;
    std::unique_ptr<OutputScheduler> scheduler_;
    std::unique_ptr<VirtualInstrumentSink> sink_;
    std::unique_ptr<PlaybackHost> host_;
    std::unique_ptr<QueuedPlayback> queue_;
    EventLog log_;
    ObserverList fanout_;
    std::unique_ptr<DuetEngine> engine_;
    long long last_tick_ = -1;
};

// Wire events for a closed performance shifted by offset_ms. At equal times
// NoteOffs come first, then controls, then NoteOns.
std::vector<MidiEvent> performance_events(const Performance& perf, double offset_ms, const TrackerConfig& pedals = {});

// The first notes of a bundled piece that end before phrase_ms.
Performance corpus_phrase(std::size_t index, double phrase_ms);

// Human phrases cut from the bundled pieces, each followed by a soft-pedal tap
// (takeover), ai_ms of generation and another tap (reclaim).
std::vector<MidiEvent> alternating_script(int turns, double phrase_ms, double ai_ms, std::uint64_t seed,
                                          const TrackerConfig& pedals = {});

// Reconstructs the generated part from an acoustic log: each Sounded event is
// paired with the next Damped event of its pitch.
std::vector<Note> notes_from_acoustic_log(const std::vector<AcousticEvent>& log);

} // namespace duet
