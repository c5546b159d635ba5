#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <thread>

#include "duet/calibration.hpp"
#include "duet/mock_backend.hpp"
#include "duet/runtime.hpp"
#include "duet/simulation.hpp"

using namespace duet;

namespace {

struct LiveRig {
    SteadyClock clock;
    InstrumentModel model;
    VirtualDisklavier instrument{model};
    OutputScheduler scheduler;
    VirtualInstrumentSink sink{instrument};
    PlaybackHost host{scheduler, sink};
    MockBackend backend;
    EventLog log;
    LiveRuntime runtime;

    explicit LiveRig(EngineConfig config)
        : scheduler(SchedulerConfig{}, calibrate()),
          backend(MockBackend::fit_default(config.tokenizer), CostModel{}, clock),
          runtime(config, backend, host, clock, &log) {}

    CalibrationTable calibrate() {
        VirtualDisklavier probe(model);
        VirtualCalibrationIo io(probe);
        return run_calibration(io, all_velocities(), 1, "test");
    }

    void wait_until(double t) {
        const double d = t - clock.now_ms();
        if (d > 0.0) {
            clock.sleep_ms(d);
        }
    }

    void play(const std::vector<MidiEvent>& events, double offset) {
        for (const auto& ev : events) {
            wait_until(ev.timestamp_ms + offset);
            runtime.submit(ev);
        }
    }
};

} // namespace

TEST_CASE("live runtime plays a turn on real time") {
    EngineConfig config;
    config.reclaim_flush = ReclaimFlush::CutImmediately;
    LiveRig rig(config);
    rig.runtime.start();
    const double t0 = std::ceil(rig.clock.now_ms()) + 20.0;
    rig.play(performance_events(corpus_phrase(1, 1200.0), 0.0), t0);
    rig.wait_until(t0 + 1300.0);
    rig.runtime.submit(MidiEvent::control(67, 127, 0.0));
    rig.runtime.submit(MidiEvent::control(67, 0, 0.0));
    rig.wait_until(t0 + 2800.0);
    Phase during = Phase::Listen;
    rig.runtime.call([&](DuetEngine& e) { during = e.phase(); });
    CHECK(during == Phase::Generating);
    rig.runtime.submit(MidiEvent::control(67, 127, 0.0));
    rig.runtime.submit(MidiEvent::control(67, 0, 0.0));
    rig.wait_until(t0 + 3000.0);
    rig.runtime.stop();

    auto& engine = rig.runtime.engine();
    CHECK(engine.phase() == Phase::Listen);
    REQUIRE(engine.reports().size() == 1);
    const auto& r = engine.reports()[0];
    REQUIRE(r.first_token_ms);
    CHECK(*r.first_token_ms - r.signal_time_ms < 50.0);
    REQUIRE(r.first_note_sound_ms);
    CHECK(r.notes_scheduled > 0);

    // The context holds the human phrase plus whatever sounded.
    const auto perf = engine.context_performance();
    const auto full = tokenize(perf.notes, perf.pedals, config.tokenizer);
    const auto& tr = engine.transcript();
    REQUIRE(tr.size() <= full.size());
    CHECK(std::equal(tr.begin(), tr.end(), full.begin()));

    // Drain the output side; nothing may stay down.
    double t = rig.clock.now_ms();
    for (int i = 0; i < 20000 && rig.scheduler.pending() > 0; ++i) {
        t += 1.0;
        rig.host.tick(t);
    }
    CHECK(rig.scheduler.pending() == 0);
    CHECK(rig.instrument.keys_down().empty());
    for (const auto& a : rig.instrument.log()) {
        CHECK(a.kind != AcousticKind::RejectedRetrigger);
    }

    auto delays = rig.runtime.ingest_delays();
    REQUIRE(!delays.empty());
    std::sort(delays.begin(), delays.end());
    CHECK(delays[delays.size() / 2] < 5.0);
}

TEST_CASE("live runtime calls run on the inference thread and stop is idempotent") {
    LiveRig rig(EngineConfig{});
    CHECK_THROWS_AS(rig.runtime.call([](DuetEngine&) {}), std::logic_error);
    rig.runtime.start();
    std::thread::id seen;
    rig.runtime.call([&](DuetEngine&) { seen = std::this_thread::get_id(); });
    CHECK(seen != std::this_thread::get_id());
    CHECK_THROWS_AS(rig.runtime.call([](DuetEngine&) { throw std::runtime_error("boom"); }), std::runtime_error);
    rig.runtime.stop();
    rig.runtime.stop();
    CHECK_FALSE(rig.runtime.running());
}
