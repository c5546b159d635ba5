#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace duet {

enum class MidiKind : std::uint8_t { NoteOn, NoteOff, Control };

// Timestamped wire event on the monotonic session clock.
struct MidiEvent {
    MidiKind kind = MidiKind::NoteOn;
    int pitch = 0;       // NoteOn / NoteOff
    int velocity = 0;    // NoteOn / NoteOff
    int controller = 0;  // Control
    int value = 0;       // Control
    double timestamp_ms = 0.0;

    static MidiEvent note_on(int pitch, int velocity, double t_ms);
    static MidiEvent note_off(int pitch, double t_ms, int velocity = 0);
    static MidiEvent control(int controller, int value, double t_ms);

    bool is_note() const { return kind != MidiKind::Control; }

    friend bool operator==(const MidiEvent&, const MidiEvent&) = default;
};

// NoteOn with velocity 0 becomes NoteOff.
MidiEvent normalized(MidiEvent ev);

// Throws std::invalid_argument when a field is out of its 7-bit range or the
// timestamp is negative / not finite.
void validate(const MidiEvent& ev);

std::string to_string(const MidiEvent& ev);

// Wire encoding (status bytes 0x80 / 0x90 / 0xB0).
std::vector<std::uint8_t> encode_wire(const MidiEvent& ev, int channel = 0);

// Incremental wire decoder with running status. Real-time bytes (0xF8..0xFF)
// pass through without disturbing running status; system common messages
// clear it.
class WireDecoder {
public:
    std::optional<MidiEvent> feed(std::uint8_t byte, double t_ms);
    int last_channel() const { return last_channel_; }

private:
    std::uint8_t status_ = 0;
    std::uint8_t data_[2] = {0, 0};
    int have_ = 0;
    int last_channel_ = 0;
    bool in_sysex_ = false;
};

// A reconstructed note. An empty duration marks a hanging (OPEN) note.
struct Note {
    int pitch = 0;
    double onset_ms = 0.0;
    std::optional<double> duration_ms;
    int velocity = 64;

    bool is_open() const { return !duration_ms.has_value(); }
    double end_ms() const { return onset_ms + duration_ms.value_or(0.0); }

    friend bool operator==(const Note&, const Note&) = default;
};

enum class Pedal : std::uint8_t { Sustain, SoftUnaCorda };
enum class PedalState : std::uint8_t { On, Off };

struct PedalEvent {
    Pedal pedal = Pedal::Sustain;
    PedalState state = PedalState::On;
    double time_ms = 0.0;

    friend bool operator==(const PedalEvent&, const PedalEvent&) = default;
};

const char* to_string(Pedal p);
const char* to_string(PedalState s);

// Sorts by onset, then pitch; stable for equal keys.
void sort_by_onset(std::vector<Note>& notes);

} // namespace duet
