#include "duet/midi_event.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace duet {

MidiEvent MidiEvent::note_on(int pitch, int velocity, double t_ms) {
    MidiEvent ev;
    ev.kind = MidiKind::NoteOn;
    ev.pitch = pitch;
    ev.velocity = velocity;
    ev.timestamp_ms = t_ms;
    return ev;
}

MidiEvent MidiEvent::note_off(int pitch, double t_ms, int velocity) {
    MidiEvent ev;
    ev.kind = MidiKind::NoteOff;
    ev.pitch = pitch;
    ev.velocity = velocity;
    ev.timestamp_ms = t_ms;
    return ev;
}

MidiEvent MidiEvent::control(int controller, int value, double t_ms) {
    MidiEvent ev;
    ev.kind = MidiKind::Control;
    ev.controller = controller;
    ev.value = value;
    ev.timestamp_ms = t_ms;
    return ev;
}

MidiEvent normalized(MidiEvent ev) {
    if (ev.kind == MidiKind::NoteOn && ev.velocity == 0) {
        ev.kind = MidiKind::NoteOff;
    }
    return ev;
}

namespace {

bool seven_bit(int v) { return v >= 0 && v <= 127; }

} // namespace

void validate(const MidiEvent& ev) {
    if (!std::isfinite(ev.timestamp_ms) || ev.timestamp_ms < 0.0) {
        throw std::invalid_argument("midi event: timestamp must be finite and non-negative");
    }
    if (ev.is_note()) {
        if (!seven_bit(ev.pitch) || !seven_bit(ev.velocity)) {
            throw std::invalid_argument("midi event: pitch/velocity out of range: " + to_string(ev));
        }
    } else if (!seven_bit(ev.controller) || !seven_bit(ev.value)) {
        throw std::invalid_argument("midi event: controller/value out of range: " + to_string(ev));
    }
}

std::string to_string(const MidiEvent& ev) {
    std::ostringstream os;
    switch (ev.kind) {
    case MidiKind::NoteOn:
        os << "NoteOn(" << ev.pitch << ", v=" << ev.velocity;
        break;
    case MidiKind::NoteOff:
        os << "NoteOff(" << ev.pitch;
        break;
    case MidiKind::Control:
        os << "Control(cc" << ev.controller << ", " << ev.value;
        break;
    }
    os << ", t=" << ev.timestamp_ms << ")";
    return os.str();
}

std::vector<std::uint8_t> encode_wire(const MidiEvent& ev, int channel) {
    const auto ch = static_cast<std::uint8_t>(channel & 0x0F);
    switch (ev.kind) {
    case MidiKind::NoteOn:
        return {static_cast<std::uint8_t>(0x90 | ch), static_cast<std::uint8_t>(ev.pitch & 0x7F),
                static_cast<std::uint8_t>(ev.velocity & 0x7F)};
    case MidiKind::NoteOff:
        return {static_cast<std::uint8_t>(0x80 | ch), static_cast<std::uint8_t>(ev.pitch & 0x7F),
                static_cast<std::uint8_t>(ev.velocity & 0x7F)};
    case MidiKind::Control:
        return {static_cast<std::uint8_t>(0xB0 | ch), static_cast<std::uint8_t>(ev.controller & 0x7F),
                static_cast<std::uint8_t>(ev.value & 0x7F)};
    }
    return {};
}

std::optional<MidiEvent> WireDecoder::feed(std::uint8_t byte, double t_ms) {
    if (byte >= 0xF8) {
        return std::nullopt; // real-time
    }
    if (byte & 0x80) {
        if (byte == 0xF0) {
            in_sysex_ = true;
            status_ = 0;
            return std::nullopt;
        }
        in_sysex_ = false;
        if (byte >= 0xF0) {
            status_ = 0; // system common cancels running status
            return std::nullopt;
        }
        status_ = byte;
        have_ = 0;
        return std::nullopt;
    }
    if (in_sysex_ || status_ == 0) {
        return std::nullopt;
    }

    const int type = status_ & 0xF0;
    const int needed = (type == 0xC0 || type == 0xD0) ? 1 : 2;
    data_[have_++] = byte;
    if (have_ < needed) {
        return std::nullopt;
    }
    have_ = 0;
    last_channel_ = status_ & 0x0F;

    switch (type) {
    case 0x80:
        return MidiEvent::note_off(data_[0], t_ms, data_[1]);
    case 0x90:
        return normalized(MidiEvent::note_on(data_[0], data_[1], t_ms));
    case 0xB0:
        return MidiEvent::control(data_[0], data_[1], t_ms);
    default:
        return std::nullopt; // aftertouch, program change, pitch bend: not piano events
    }
}

const char* to_string(Pedal p) {
    return p == Pedal::Sustain ? "sustain" : "soft";
}

const char* to_string(PedalState s) {
    return s == PedalState::On ? "on" : "off";
}

void sort_by_onset(std::vector<Note>& notes) {
    std::stable_sort(notes.begin(), notes.end(), [](const Note& a, const Note& b) {
        if (a.onset_ms != b.onset_ms) {
            return a.onset_ms < b.onset_ms;
        }
        return a.pitch < b.pitch;
    });
}

} // namespace duet
