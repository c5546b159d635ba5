#pragma once

#include <atomic>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "duet/config.hpp"
#include "duet/smf.hpp"

namespace duet {

namespace exit_code {
constexpr int ok = 0;
constexpr int failure = 1;
constexpr int config = 2;
constexpr int device = 3;
constexpr int invariant = 4;
} // namespace exit_code

struct CommandIo {
    std::ostream& out;
    std::ostream& err;
    // Live commands run until this turns true (or their duration ends).
    const std::atomic<bool>* stop = nullptr;
};

struct LiveOptions {
    std::string midi_in;
    std::string midi_out;
    bool gateway = false;
    double duration_ms = 0.0; // 0: until stopped
    std::string out_dir;      // session files; empty: none
};

struct SimOptions {
    std::string script;       // SMF; empty: built-in alternating duet
    std::string out_dir = ".";
    bool gateway = false;     // drive a live virtual session from the gateway instead
    double duration_ms = 0.0; // gateway mode only
    int turns = 3;            // built-in script
};

struct CalibrateOptions {
    std::string midi_in;  // both empty: calibrate the simulated instrument
    std::string midi_out;
    std::string out = "calibration.txt";
    int pitch = 60;
};

int cmd_run(const AppConfig& config, const LiveOptions& options, CommandIo io);
int cmd_sim(const AppConfig& config, const SimOptions& options, CommandIo io);
int cmd_calibrate(const AppConfig& config, const CalibrateOptions& options, CommandIo io);
int cmd_bench(const AppConfig& config, const std::string& out_tsv, CommandIo io);
int cmd_replay(const AppConfig& config, const std::string& smf_path, CommandIo io);
int cmd_serve_backend(const AppConfig& config, const std::string& bind, double duration_ms, CommandIo io);

// Records what a session produced. Reads happen after the engine stopped.
class SessionRecorder : public EngineObserver {
public:
    explicit SessionRecorder(TrackerConfig tracker) : tracker_(tracker) {}

    void on_human_event(const MidiEvent& ev) override { human_.push_back(ev); }
    void on_ai_note(const AiNoteInfo& info) override;

    // Human notes rebuilt from the input, plus every generated note that
    // sounded, at its target times.
    Performance human() const;
    std::vector<Note> generated() const;
    std::size_t dropped() const { return dropped_; }

    // Format-0 SMF: human notes on channel 0, generated on channel 1.
    std::vector<std::uint8_t> smf() const;

private:
    TrackerConfig tracker_;
    std::vector<MidiEvent> human_;
    std::vector<AiNoteInfo> sounded_;
    std::size_t dropped_ = 0;
};

SmfOptions session_smf_options(const TrackerConfig& tracker);

// Plays generated notes through a fresh scheduler and virtual instrument
// and checks the output invariants.
struct ReplayResult {
    std::size_t notes = 0;
    std::size_t sounded = 0;
    std::size_t dropped = 0;
    double max_error_ms = 0.0;
    double tolerance_ms = 0.0;
    std::vector<std::string> violations;
};

ReplayResult replay_generated(const std::vector<Note>& notes, const SimulationSetup& setup,
                              const CalibrationTable& table);

// The table named in the config, or a fresh calibration of the simulated
// instrument.
CalibrationTable table_for(const AppConfig& config);

// Mock (zero cost unless `with_cost`) or remote, per backend.address.
std::unique_ptr<Backend> make_backend(const AppConfig& config, Clock& clock, bool with_cost);

} // namespace duet
