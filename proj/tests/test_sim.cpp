#include <doctest.h>

#include "duet/simulation.hpp"
#include "scenarios.hpp"

using namespace duet;

TEST_CASE("context after each turn is the human part plus what was heard") {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto r = test::context_preservation(seed, 4);
        INFO(r.problem);
        CHECK(r.turns_checked == 4);
        CHECK(r.mismatches == 0);
    }
}

TEST_CASE("random duet traces keep the retrigger gap and release every key") {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        const auto r = test::random_duet_trace(seed);
        INFO("seed " << seed);
        CHECK(r.notes_on > 0);
        CHECK(r.gap_violations == 0);
        CHECK(r.rejected == 0);
        CHECK(r.undamped == 0);
        CHECK(r.keys_down == 0);
    }
}

TEST_CASE("simulation is bit-reproducible") {
    auto once = [] {
        SimulationSetup setup;
        setup.instrument.jitter_ms = 3.0;
        const auto script = alternating_script(2, 3000.0, 2500.0, 5);
        DuetSimulation sim(setup);
        sim.run(script, script.back().timestamp_ms + 100.0);
        sim.settle(script.back().timestamp_ms + 20000.0);
        return sim.instrument().export_log() + sim.log().text();
    };
    const auto a = once();
    CHECK(a == once());
    CHECK(a.find("takeover_report") != std::string::npos);
}

TEST_CASE("reclaim with cut leaves nothing pending and no key down") {
    SimulationSetup setup;
    setup.engine.reclaim_flush = ReclaimFlush::CutImmediately;
    const auto script = alternating_script(1, 3000.0, 800.0, 2);
    DuetSimulation sim(setup);
    const double reclaim = script[script.size() - 2].timestamp_ms;
    sim.run(script, reclaim + 1.0);
    CHECK(sim.engine().phase() == Phase::Listen);
    sim.advance(reclaim + 200.0);
    CHECK(sim.scheduler().pending() == 0);
    CHECK(sim.instrument().keys_down().empty());
}

TEST_CASE("finish-sounding reclaim lets notes end at their scheduled release") {
    SimulationSetup setup;
    setup.engine.reclaim_flush = ReclaimFlush::FinishSoundingNotes;
    DuetSimulation sim(setup);
    sim.run(performance_events(corpus_phrase(3, 3000.0), 0.0), 3200.0);
    sim.inject(MidiEvent::control(67, 127, 0.0));
    sim.advance(3300.0);
    sim.inject(MidiEvent::control(67, 0, 0.0));
    // Reclaim at the first moment some generated key is down.
    while (sim.instrument().keys_down().empty() && sim.clock().now_ms() < 8000.0) {
        sim.advance(sim.clock().now_ms() + 1.0);
    }
    REQUIRE(sim.engine().phase() == Phase::Generating);
    const auto held = sim.instrument().keys_down();
    REQUIRE(!held.empty());
    const double reclaim = sim.clock().now_ms();
    sim.inject(MidiEvent::control(67, 127, 0.0));
    CHECK(sim.engine().phase() == Phase::Listen);
    sim.settle(reclaim + 15000.0);
    bool late_off = false;
    for (const auto& em : sim.host().emitted()) {
        CHECK_FALSE((em.event.kind == MidiKind::NoteOn && em.event.timestamp_ms > reclaim));
        late_off |= em.event.kind == MidiKind::NoteOff && em.event.pitch == held[0] && em.event.timestamp_ms > reclaim;
    }
    CHECK(late_off);
    CHECK(sim.instrument().keys_down().empty());
}

TEST_CASE("generated part for a fixed seed") {
    SimulationSetup setup;
    const auto script = alternating_script(1, 4000.0, 3000.0, 1);
    DuetSimulation sim(setup);
    sim.run(script, script.back().timestamp_ms + 100.0);
    sim.settle(script.back().timestamp_ms + 20000.0);
    const auto& emitted = sim.host().emitted();
    std::string head;
    int n = 0;
    for (const auto& em : emitted) {
        if (em.event.kind == MidiKind::NoteOn && n < 6) {
            head += to_string(em.event) + "\n";
            ++n;
        }
    }
    // Frozen from a reference run; any change to sampling or scheduling shows here.
    CHECK(head ==
          "NoteOn(55, v=68, t=4371)\n"
          "NoteOn(52, v=68, t=4371)\n"
          "NoteOn(57, v=68, t=4371)\n"
          "NoteOn(83, v=100, t=4390)\n"
          "NoteOn(60, v=68, t=4771)\n"
          "NoteOn(76, v=84, t=4931)\n");
}
