#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/midi_event.hpp"
#include "duet/note_tracker.hpp"

namespace duet {

class SmfParseError : public std::runtime_error {
public:
    SmfParseError(const std::string& what, std::size_t offset);
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

struct SmfOptions {
    int ticks_per_quarter = 480;
    int tempo_us_per_quarter = 500000;
    int human_channel = 0;
    int generated_channel = 1;
    TrackerConfig pedals; // controller numbers written / recognised
};

// A recorded session: notes (with a parallel generated flag) and pedal log.
struct SmfPerformance {
    std::vector<Note> notes;
    std::vector<bool> generated;
    std::vector<PedalEvent> pedals;
    std::size_t hanging_closed = 0; // notes without NoteOff closed at end of track
};

// Format 0 file, one track. Human notes on SmfOptions::human_channel,
// generated notes on SmfOptions::generated_channel. Open notes are rejected.
std::vector<std::uint8_t> save_smf(const std::vector<Note>& notes, const std::vector<PedalEvent>& pedals,
                                   const std::vector<bool>& generated, const SmfOptions& options = {});

// Accepts format 0 and 1 (tracks merged, tempo map honoured), running status,
// NoteOn velocity 0. Throws SmfParseError with the byte offset of the fault.
SmfPerformance load_smf(std::span<const std::uint8_t> bytes, const SmfOptions& options = {});

// Raw timestamped events of every track in time order (tempo map applied).
// Channel-voice events only; used for scripted sessions.
struct SmfTimedEvent {
    MidiEvent event;
    int channel = 0;
};
std::vector<SmfTimedEvent> load_smf_events(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

} // namespace duet
