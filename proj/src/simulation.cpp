#include "duet/simulation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <tuple>

#include "duet/fixtures.hpp"

namespace duet {

DuetSimulation::DuetSimulation(SimulationSetup setup, Backend* backend)
    : setup_(std::move(setup)), instrument_(setup_.instrument) {
    if (setup_.measured) {
        clock_ = std::make_unique<SkippingClock>();
    } else {
        clock_ = std::make_unique<ManualClock>();
    }
    if (backend) {
        backend_ = backend;
    } else {
        own_backend_ = std::make_unique<MockBackend>(MockBackend::fit_default(setup_.engine.tokenizer), setup_.cost,
                                                     *clock_);
        backend_ = own_backend_.get();
    }
    CalibrationTable table;
    if (setup_.table) {
        table = *setup_.table;
    } else {
        // Probe a separate instance so the performance run starts from a
        // fresh instrument state.
        VirtualDisklavier probe(setup_.instrument);
        VirtualCalibrationIo io(probe);
        table = run_calibration(io, all_velocities(), setup_.calibration_repeats, "simulated");
    }
    scheduler_ = std::make_unique<OutputScheduler>(setup_.scheduler, table);
    sink_ = std::make_unique<VirtualInstrumentSink>(instrument_);
    host_ = std::make_unique<PlaybackHost>(*scheduler_, *sink_);
    queue_ = std::make_unique<QueuedPlayback>(*clock_);
    fanout_.add(&log_);
    engine_ = std::make_unique<DuetEngine>(setup_.engine, *backend_, *queue_, *clock_, &fanout_);
}

DuetSimulation::~DuetSimulation() = default;

MockSession* DuetSimulation::mock_session() const {
    return dynamic_cast<MockSession*>(engine_->session());
}

void DuetSimulation::step_once() {
    engine_->advance_input_horizon(clock_->now_ms());
    const bool busy = engine_->poll();
    const double t = clock_->now_ms();
    const auto upto = static_cast<long long>(std::floor(t));
    for (long long ms = last_tick_ + 1; ms <= upto; ++ms) {
        const double tick = static_cast<double>(ms);
        queue_->apply_until(tick, *host_);
        for (const auto& fb : host_->tick(tick)) {
            engine_->on_feedback(fb);
        }
    }
    if (upto > last_tick_) {
        last_tick_ = upto;
    }
    if (!busy) {
        clock_->advance_to(static_cast<double>(last_tick_ + 1));
    }
}

void DuetSimulation::inject(MidiEvent ev) {
    ev.timestamp_ms = clock_->now_ms();
    engine_->on_event(ev);
}

void DuetSimulation::run(const std::vector<MidiEvent>& script, double end_ms) {
    std::size_t i = 0;
    while (clock_->now_ms() < end_ms) {
        const double now = clock_->now_ms();
        while (i < script.size() && script[i].timestamp_ms <= now) {
            engine_->on_event(script[i]);
            ++i;
        }
        step_once();
    }
    while (i < script.size()) {
        engine_->on_event(script[i]);
        ++i;
    }
}

void DuetSimulation::advance(double to_ms) {
    run({}, to_ms);
}

void DuetSimulation::settle(double limit_ms) {
    while (clock_->now_ms() < limit_ms) {
        const bool quiet = engine_->phase() == Phase::Listen && scheduler_->pending() == 0 && queue_->empty() &&
                           engine_->staged().empty() && engine_->pending_events() == 0;
        if (quiet) {
            break;
        }
        step_once();
    }
}

std::vector<MidiEvent> performance_events(const Performance& perf, double offset_ms, const TrackerConfig& pedals) {
    std::vector<MidiEvent> out;
    for (const auto& n : perf.notes) {
        if (n.is_open()) {
            throw std::invalid_argument("performance_events: open note");
        }
        out.push_back(MidiEvent::note_on(n.pitch, n.velocity, n.onset_ms + offset_ms));
        out.push_back(MidiEvent::note_off(n.pitch, n.end_ms() + offset_ms));
    }
    for (const auto& p : perf.pedals) {
        const int cc = p.pedal == Pedal::Sustain ? pedals.sustain_controller : pedals.soft_controller;
        out.push_back(MidiEvent::control(cc, p.state == PedalState::On ? 127 : 0, p.time_ms + offset_ms));
    }
    auto rank = [](const MidiEvent& e) {
        return e.kind == MidiKind::NoteOff ? 0 : e.kind == MidiKind::Control ? 1 : 2;
    };
    std::stable_sort(out.begin(), out.end(), [&](const MidiEvent& a, const MidiEvent& b) {
        return std::tuple(a.timestamp_ms, rank(a)) < std::tuple(b.timestamp_ms, rank(b));
    });
    return out;
}

Performance corpus_phrase(std::size_t index, double phrase_ms) {
    const auto corpus = fixture_corpus();
    const auto& piece = corpus[index % corpus.size()].performance;
    Performance phrase;
    for (const auto& n : piece.notes) {
        if (n.end_ms() < phrase_ms) {
            phrase.notes.push_back(n);
        }
    }
    bool sustain = false;
    for (const auto& p : piece.pedals) {
        if (p.pedal == Pedal::Sustain && p.time_ms < phrase_ms) {
            phrase.pedals.push_back(p);
            sustain = p.state == PedalState::On;
        }
    }
    if (sustain) {
        phrase.pedals.push_back(PedalEvent{Pedal::Sustain, PedalState::Off, phrase_ms});
    }
    return phrase;
}

std::vector<MidiEvent> alternating_script(int turns, double phrase_ms, double ai_ms, std::uint64_t seed,
                                          const TrackerConfig& pedals) {
    std::vector<MidiEvent> out;
    double t = 0.0;
    for (int k = 0; k < turns; ++k) {
        const auto ev = performance_events(corpus_phrase(seed + static_cast<std::uint64_t>(k), phrase_ms), t, pedals);
        out.insert(out.end(), ev.begin(), ev.end());
        t += phrase_ms + 200.0;
        out.push_back(MidiEvent::control(pedals.soft_controller, 127, t));
        out.push_back(MidiEvent::control(pedals.soft_controller, 0, t + 100.0));
        t += ai_ms;
        out.push_back(MidiEvent::control(pedals.soft_controller, 127, t));
        out.push_back(MidiEvent::control(pedals.soft_controller, 0, t + 100.0));
        t += 1000.0;
    }
    return out;
}

std::vector<MidiEvent> DuetSimulation::play_alternating(int turns, double phrase_ms, double ai_ms,
                                                        std::uint64_t seed) {
    const int soft = setup_.engine.tracker.soft_controller;
    std::vector<MidiEvent> played;
    auto play = [&](const std::vector<MidiEvent>& ev, double until) {
        run(ev, until);
        played.insert(played.end(), ev.begin(), ev.end());
    };
    double t = std::ceil(clock_->now_ms());
    for (int k = 0; k < turns; ++k) {
        play(performance_events(corpus_phrase(seed + static_cast<std::uint64_t>(k), phrase_ms), t,
                                setup_.engine.tracker),
             t + phrase_ms + 200.0);
        t += phrase_ms + 200.0;
        play({MidiEvent::control(soft, 127, t), MidiEvent::control(soft, 0, t + 100.0)}, t + ai_ms);
        t += ai_ms;
        if (engine_->phase() == Phase::Generating) {
            play({MidiEvent::control(soft, 127, t), MidiEvent::control(soft, 0, t + 100.0)}, t + 1000.0);
        } else {
            advance(t + 1000.0);
        }
        t += 1000.0;
    }
    return played;
}

std::vector<Note> notes_from_acoustic_log(const std::vector<AcousticEvent>& log) {
    std::array<std::optional<AcousticEvent>, 128> down{};
    std::vector<Note> notes;
    for (const auto& a : log) {
        auto& slot = down.at(static_cast<std::size_t>(a.pitch));
        if (a.kind == AcousticKind::Sounded) {
            slot = a;
        } else if (a.kind == AcousticKind::Damped && slot) {
            notes.push_back(Note{a.pitch, slot->time_ms, std::max(a.time_ms - slot->time_ms, 1e-3), slot->velocity});
            slot.reset();
        }
    }
    sort_by_onset(notes);
    return notes;
}

} // namespace duet
