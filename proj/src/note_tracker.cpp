#include "duet/note_tracker.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

namespace duet {

NoteTracker::NoteTracker(TrackerConfig config) : config_(config) {}

void NoteTracker::diagnose(const char* what, const MidiEvent& ev) {
    ++diagnostics_;
    spdlog::debug("tracker: {} ({})", what, to_string(ev));
}

void NoteTracker::insert_finalized(const Note& note) {
    auto& list = state_.finalized;
    const auto pos = std::upper_bound(list.begin(), list.end(), note, [](const Note& a, const Note& b) {
        if (a.onset_ms != b.onset_ms) {
            return a.onset_ms < b.onset_ms;
        }
        return a.pitch < b.pitch;
    });
    list.insert(pos, note);
}

std::vector<TrackerEmission> NoteTracker::ingest(const MidiEvent& raw) {
    if (state_.last_timestamp_ms && raw.timestamp_ms < *state_.last_timestamp_ms) {
        throw SequencingError("out-of-order event at t=" + std::to_string(raw.timestamp_ms) +
                              " after t=" + std::to_string(*state_.last_timestamp_ms));
    }
    validate(raw);
    state_.last_timestamp_ms = raw.timestamp_ms;

    const MidiEvent ev = normalized(raw);
    const double t = ev.timestamp_ms;
    std::vector<TrackerEmission> out;

    switch (ev.kind) {
    case MidiKind::NoteOn: {
        auto& slot = state_.open_notes[ev.pitch];
        if (slot) {
            const double dur = t - slot->onset_ms;
            if (dur > 0.0) {
                Note n{ev.pitch, slot->onset_ms, dur, slot->velocity};
                insert_finalized(n);
                out.emplace_back(FinalizedNote{n});
            } else {
                diagnose("zero-length note discarded on re-press", ev);
            }
        }
        slot = OpenNote{t, ev.velocity};
        ++state_.notes_seen;
        break;
    }
    case MidiKind::NoteOff: {
        auto& slot = state_.open_notes[ev.pitch];
        if (!slot) {
            diagnose("NoteOff with no open note ignored", ev);
            break;
        }
        const double dur = t - slot->onset_ms;
        if (dur > 0.0) {
            Note n{ev.pitch, slot->onset_ms, dur, slot->velocity};
            insert_finalized(n);
            out.emplace_back(FinalizedNote{n});
        } else {
            diagnose("zero-length note discarded", ev);
        }
        slot.reset();
        break;
    }
    case MidiKind::Control: {
        const bool pressed = ev.value >= config_.pedal_threshold;
        if (ev.controller == config_.sustain_controller) {
            if (pressed != state_.sustain_down) {
                state_.sustain_down = pressed;
                PedalEvent pe{Pedal::Sustain, pressed ? PedalState::On : PedalState::Off, t};
                state_.pedal_log.push_back(pe);
                out.emplace_back(PedalChange{pe});
            }
        } else if (ev.controller == config_.soft_controller) {
            if (pressed != state_.soft_down) {
                state_.soft_down = pressed;
                PedalEvent pe{Pedal::SoftUnaCorda, pressed ? PedalState::On : PedalState::Off, t};
                state_.pedal_log.push_back(pe);
                out.emplace_back(PedalChange{pe});
                if (pressed) {
                    out.emplace_back(TakeoverSignal{t});
                }
            }
        }
        break;
    }
    }
    return out;
}

std::vector<Note> NoteTracker::hanging_notes(double at_ms) const {
    std::vector<Note> out;
    for (int p = 0; p < 128; ++p) {
        const auto& slot = state_.open_notes[p];
        if (slot && slot->onset_ms <= at_ms) {
            out.push_back(Note{p, slot->onset_ms, std::nullopt, slot->velocity});
        }
    }
    sort_by_onset(out);
    return out;
}

std::optional<double> NoteTracker::earliest_open_onset() const {
    std::optional<double> best;
    for (const auto& slot : state_.open_notes) {
        if (slot && (!best || slot->onset_ms < *best)) {
            best = slot->onset_ms;
        }
    }
    return best;
}

Note NoteTracker::close_open(int pitch, double duration_ms) {
    auto& slot = state_.open_notes.at(static_cast<std::size_t>(pitch));
    if (!slot) {
        throw std::logic_error("close_open: pitch " + std::to_string(pitch) + " is not open");
    }
    if (!(duration_ms > 0.0)) {
        throw std::invalid_argument("close_open: duration must be positive");
    }
    Note n{pitch, slot->onset_ms, duration_ms, slot->velocity};
    slot.reset();
    insert_finalized(n);
    return n;
}

void NoteTracker::merge_finalized(const Note& note) {
    if (note.is_open() || !(*note.duration_ms > 0.0)) {
        throw std::invalid_argument("merge_finalized: note must be closed with positive duration");
    }
    insert_finalized(note);
    ++state_.notes_seen;
}

} // namespace duet
