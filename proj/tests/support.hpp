#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "duet/midi_event.hpp"
#include "duet/rng.hpp"
#include "duet/tokenizer.hpp"

namespace duet::test {

// Random performer stream: notes with overlaps, re-presses, stray NoteOffs,
// sustain and soft pedal traffic. Timestamps non-decreasing.
inline std::vector<MidiEvent> random_stream(SplitMix64& rng, int n_events, double max_gap_ms = 120.0,
                                            bool soft_pedal = true) {
    std::vector<MidiEvent> out;
    double t = static_cast<double>(rng.range(0, 50));
    for (int i = 0; i < n_events; ++i) {
        t += rng.uniform() < 0.2 ? 0.0 : std::floor(rng.uniform(0.0, max_gap_ms) * 4.0) / 4.0;
        const double r = rng.uniform();
        const int pitch = static_cast<int>(rng.range(48, 72));
        if (r < 0.45) {
            out.push_back(MidiEvent::note_on(pitch, static_cast<int>(rng.range(1, 127)), t));
        } else if (r < 0.85) {
            out.push_back(MidiEvent::note_off(pitch, t));
        } else if (r < 0.92) {
            out.push_back(MidiEvent::control(64, rng.uniform() < 0.5 ? 0 : 127, t));
        } else if (soft_pedal) {
            out.push_back(MidiEvent::control(67, static_cast<int>(rng.range(0, 127)), t));
        } else {
            out.push_back(MidiEvent::note_on(pitch, 0, t));
        }
    }
    return out;
}

// Random closed performance with grid-free times.
inline Performance random_performance(SplitMix64& rng, int n_notes, int n_pedals, double span_ms) {
    Performance p;
    for (int i = 0; i < n_notes; ++i) {
        Note n;
        n.pitch = static_cast<int>(rng.range(0, 127));
        n.onset_ms = rng.uniform(0.0, span_ms);
        n.duration_ms = rng.uniform() < 0.05 ? rng.uniform(10000.0, 15000.0) : rng.uniform(0.5, 3000.0);
        n.velocity = static_cast<int>(rng.range(1, 127));
        p.notes.push_back(n);
    }
    sort_by_onset(p.notes);
    std::vector<double> times;
    for (int i = 0; i < n_pedals; ++i) {
        times.push_back(rng.uniform(0.0, span_ms));
    }
    std::sort(times.begin(), times.end());
    for (std::size_t i = 0; i < times.size(); ++i) {
        p.pedals.push_back(PedalEvent{Pedal::Sustain, i % 2 == 0 ? PedalState::On : PedalState::Off, times[i]});
    }
    if (rng.uniform() < 0.3) {
        p.pedals.push_back(PedalEvent{Pedal::SoftUnaCorda, PedalState::On, rng.uniform(0.0, span_ms)});
        std::stable_sort(p.pedals.begin(), p.pedals.end(),
                         [](const PedalEvent& a, const PedalEvent& b) { return a.time_ms < b.time_ms; });
    }
    return p;
}

} // namespace duet::test
