#include <doctest.h>

#include <map>
#include <set>

#include "duet/calibration.hpp"
#include "duet/output_scheduler.hpp"
#include "duet/virtual_disklavier.hpp"
#include "support.hpp"

using namespace duet;

namespace {

CalibrationTable curve_table(const LatencyCurve& curve) {
    std::vector<CalibrationBucket> b;
    for (int v = 1; v <= 127; ++v) {
        b.push_back({v, v, curve.at(v)});
    }
    return CalibrationTable(b, {"test", "-", 1});
}

struct Rig {
    OutputScheduler sched;
    VirtualDisklavier inst;
    std::vector<Emission> emitted;
    std::vector<DroppedNote> dropped;
    double now = 0.0;

    Rig(SchedulerConfig sc, CalibrationTable table, InstrumentModel model = {})
        : sched(sc, std::move(table)), inst(std::move(model)) {}

    void run_until(double t) {
        for (; now <= t; now += 1.0) {
            auto out = sched.tick(now);
            for (const auto& e : out.emitted) {
                inst.receive(e.event, now);
                emitted.push_back(e);
            }
            dropped.insert(dropped.end(), out.dropped.begin(), out.dropped.end());
        }
    }
};

// Scans an emitted stream: every NoteOn of a pitch comes at least `gap` after
// that pitch's previous NoteOff, and every NoteOn is eventually followed by a
// NoteOff.
void check_emitted_log(const std::vector<Emission>& log, double gap) {
    std::map<int, double> last_off;
    std::map<int, int> down;
    for (const auto& e : log) {
        const int p = e.event.pitch;
        if (e.event.kind == MidiKind::NoteOn) {
            if (last_off.count(p)) {
                REQUIRE(e.event.timestamp_ms - last_off[p] >= gap);
            }
            REQUIRE(down[p] == 0);
            down[p] = 1;
        } else if (e.event.kind == MidiKind::NoteOff) {
            REQUIRE(down[p] == 1);
            down[p] = 0;
            last_off[p] = e.event.timestamp_ms;
        }
    }
    for (const auto& [p, d] : down) {
        REQUIRE(d == 0);
    }
}

} // namespace

TEST_CASE("NoteOn send time subtracts the calibrated latency") {
    OutputScheduler s({}, CalibrationTable::constant(45.0));
    s.schedule_note(60, 100, 1000, 1500);
    CHECK(*s.next_send_ms() == 955.0);
    auto out = s.tick(955);
    REQUIRE(out.emitted.size() == 1);
    CHECK(out.emitted[0].event.kind == MidiKind::NoteOn);
    CHECK(out.emitted[0].target_sound_ms == 1000.0);
}

TEST_CASE("pending NoteOff is moved earlier for a retrigger") {
    OutputScheduler s({}, CalibrationTable::constant(45.0));
    s.schedule_note(60, 100, 1000, 2000); // seqs 1, 2
    s.schedule_note(60, 100, 2055, 2500); // NoteOn send 2010
    CHECK(s.find(2)->send_ms == 1950.0);
    CHECK(s.find(3)->send_ms == 2010.0);
}

TEST_CASE("a NoteOff already sent pushes the new NoteOn back") {
    OutputScheduler s({}, CalibrationTable::constant(45.0));
    s.schedule_note(60, 100, 1000, 2000);
    s.tick(955);
    s.tick(2000);
    s.schedule_note(60, 100, 2055, 2500);
    const auto* on = s.find(3);
    CHECK(on->send_ms == 2060.0);
    CHECK(on->target_sound_ms == 2105.0);
    CHECK(on->requested_target_ms == 2055.0);
}

TEST_CASE("the new NoteOn yields when the old note would lose its length") {
    OutputScheduler s({}, CalibrationTable::constant(45.0));
    s.schedule_note(60, 100, 1000, 1100); // on send 955
    s.schedule_note(60, 100, 1040, 1200); // on send 995 wants off at 935
    CHECK(s.find(2)->send_ms == 956.0);
    CHECK(s.find(3)->send_ms == 1016.0);
}

TEST_CASE("staleness drops late NoteOns with their NoteOffs") {
    OutputScheduler s({}, CalibrationTable::constant(45.0));
    s.schedule_note(60, 100, 1045, 1500); // send 1000
    auto out = s.tick(1005);
    CHECK(out.emitted.size() == 1);

    OutputScheduler late({}, CalibrationTable::constant(45.0));
    late.schedule_note(60, 100, 1045, 1500);
    out = late.tick(1040);
    CHECK(out.emitted.empty());
    REQUIRE(out.dropped.size() == 1);
    CHECK(out.dropped[0].stale);
    CHECK(late.pending() == 0);
}

TEST_CASE("cancel keeps NoteOffs of sounding notes") {
    OutputScheduler s({}, CalibrationTable::constant(45.0));
    s.schedule_note(60, 100, 1000, 2000);
    s.schedule_note(62, 100, 3000, 4000);
    s.tick(960);
    CHECK(s.cancel([](const ScheduledEvent&) { return false; }) == 0);
    CHECK(s.cancel([](const ScheduledEvent&) { return true; }) == 2);
    CHECK(s.pending() == 1);
    auto out = s.tick(2000);
    REQUIRE(out.emitted.size() == 1);
    CHECK(out.emitted[0].event.kind == MidiKind::NoteOff);
    CHECK(s.pending() == 0);
    CHECK(s.hurry_offs(0, [](const ScheduledEvent&) { return true; }) == 0);
}

TEST_CASE("queue overflow is backpressure") {
    SchedulerConfig sc;
    sc.max_pending = 4;
    OutputScheduler s(sc, CalibrationTable::constant(45.0));
    s.schedule_note(60, 100, 1000, 2000);
    s.schedule_note(61, 100, 1000, 2000);
    CHECK_THROWS_AS(s.schedule_note(62, 100, 1000, 2000), Backpressure);
    CHECK_THROWS_AS(s.schedule_note(62, 100, 1000, 1000), std::invalid_argument);
}

TEST_CASE("property: tick matches a brute-force per-millisecond simulator") {
    SplitMix64 rng(404);
    const SchedulerConfig sc;
    for (int run = 0; run < 200; ++run) {
        const LatencyCurve curve;
        OutputScheduler s(sc, curve_table(curve));
        const int n = static_cast<int>(rng.range(1, 40));
        for (int i = 0; i < n; ++i) {
            const double on = rng.uniform(200.0, 3000.0);
            s.schedule_note(static_cast<int>(rng.range(60, 66)), static_cast<int>(rng.range(1, 127)), on,
                            on + rng.uniform(5.0, 600.0));
        }
        struct Snap {
            std::uint64_t seq;
            std::uint64_t note;
            MidiKind kind;
            double send;
        };
        std::vector<Snap> snaps;
        for (std::uint64_t seq = 1; seq <= static_cast<std::uint64_t>(2 * n); ++seq) {
            const auto* e = s.find(seq);
            snaps.push_back({seq, e->note_id, e->payload.kind, e->send_ms});
        }
        const double first_tick = std::floor(rng.uniform(0.0, 400.0));

        // Oracle: every millisecond, consider every event.
        // A NoteOn that finds its key released less than a gap ago (because
        // the NoteOff itself went out late) waits out the gap.
        std::vector<std::pair<std::uint64_t, double>> expected; // (seq, time)
        std::set<std::uint64_t> done;
        std::set<std::uint64_t> dead_notes;
        std::map<std::uint64_t, int> pitch_of;
        for (std::uint64_t seq = 1; seq <= snaps.size(); seq += 2) {
            pitch_of[snaps[seq - 1].note] = s.find(seq)->payload.pitch;
        }
        std::map<int, double> last_off;
        for (double t = first_tick; t <= 5000.0; t += 1.0) {
            for (;;) {
                Snap* next = nullptr;
                for (auto& sn : snaps) {
                    if (done.count(sn.seq) || dead_notes.count(sn.note) || sn.send > t) {
                        continue;
                    }
                    if (!next || sn.send < next->send || (sn.send == next->send && sn.seq < next->seq)) {
                        next = &sn;
                    }
                }
                if (!next) {
                    break;
                }
                const int pitch = pitch_of[next->note];
                if (next->kind == MidiKind::NoteOn) {
                    if (t - next->send > sc.staleness_threshold_ms) {
                        dead_notes.insert(next->note);
                        continue;
                    }
                    if (last_off.count(pitch) && t - last_off[pitch] < sc.retrigger_gap_ms) {
                        next->send = last_off[pitch] + sc.retrigger_gap_ms;
                        Snap& off = snaps[next->seq];
                        off.send = std::max(off.send, next->send + sc.tick_quantum_ms);
                        continue;
                    }
                } else {
                    last_off[pitch] = t;
                }
                done.insert(next->seq);
                expected.emplace_back(next->seq, t);
            }
        }

        std::vector<std::pair<std::uint64_t, double>> got;
        std::map<std::pair<std::uint64_t, MidiKind>, std::uint64_t> seq_of;
        for (const auto& sn : snaps) {
            seq_of[{sn.note, sn.kind}] = sn.seq;
        }
        for (double t = first_tick; t <= 5000.0; t += 1.0) {
            for (const auto& e : s.tick(t).emitted) {
                got.emplace_back(seq_of.at({e.note_id, e.event.kind}), t);
            }
        }
        for (std::size_t i = 0; i < std::min(got.size(), expected.size()); ++i) {
            if (got[i] != expected[i]) {
                const auto* a = s.find(got[i].first);
                MESSAGE("run " << run << " i " << i << " got " << got[i].first << "@" << got[i].second << " exp "
                               << expected[i].first << "@" << expected[i].second << " " << (a ? a->send_ms : -1));
                break;
            }
        }
        REQUIRE(got == expected);
    }
}

TEST_CASE("property: retrigger safety and no stuck keys under random cancels") {
    SplitMix64 rng(9);
    for (int run = 0; run < 300; ++run) {
        InstrumentModel model;
        Rig rig({}, curve_table(model.curve), model);
        double t = 0.0;
        for (int step = 0; step < 60; ++step) {
            t += rng.uniform(0.0, 90.0);
            const double on = t + 150.0 + rng.uniform(0.0, 100.0);
            rig.sched.schedule_note(static_cast<int>(rng.range(60, 63)), static_cast<int>(rng.range(1, 127)), on,
                                    on + rng.uniform(1.0, 400.0), static_cast<std::uint32_t>(step % 3));
            rig.run_until(t);
            if (rng.uniform() < 0.05) {
                const auto tag = static_cast<std::uint32_t>(rng.range(0, 2));
                rig.sched.cancel([tag](const ScheduledEvent& e) { return e.tag == tag; });
                if (rng.uniform() < 0.5) {
                    rig.sched.hurry_offs(rig.now, [](const ScheduledEvent&) { return true; });
                }
            }
        }
        rig.run_until(t + 5000.0);
        check_emitted_log(rig.emitted, rig.sched.config().retrigger_gap_ms);
        REQUIRE(rig.inst.rejected_count() == 0);
        REQUIRE(rig.inst.keys_down().empty());
        REQUIRE(rig.sched.pending() == 0);
    }
}

TEST_CASE("property: a larger staleness threshold never drops more") {
    SplitMix64 rng(31);
    for (int run = 0; run < 100; ++run) {
        std::vector<std::tuple<int, int, double, double>> notes;
        for (int i = 0; i < 30; ++i) {
            const double on = rng.uniform(0.0, 2000.0);
            notes.emplace_back(static_cast<int>(rng.range(40, 80)), static_cast<int>(rng.range(1, 127)), on,
                               on + rng.uniform(10.0, 300.0));
        }
        std::vector<double> ticks;
        double t = 0.0;
        while (t < 3000.0) {
            t += rng.uniform() < 0.1 ? rng.uniform(20.0, 80.0) : 1.0;
            ticks.push_back(std::floor(t));
        }
        std::size_t prev = SIZE_MAX;
        for (double thr : {0.0, 10.0, 30.0, 60.0, 200.0}) {
            SchedulerConfig sc;
            sc.staleness_threshold_ms = thr;
            OutputScheduler s(sc, curve_table(LatencyCurve{}));
            for (const auto& [p, v, on, off] : notes) {
                s.schedule_note(p, v, on, off);
            }
            std::size_t dropped = 0;
            for (double tk : ticks) {
                dropped += s.tick(tk).dropped.size();
            }
            REQUIRE(dropped <= prev);
            prev = dropped;
        }
    }
}

TEST_CASE("compensated notes sound on target on the virtual instrument") {
    InstrumentModel model;
    VirtualDisklavier probe_inst(model);
    VirtualCalibrationIo io(probe_inst);
    const auto table = run_calibration(io, all_velocities(), 1, "test");
    Rig rig({}, table, model);
    SplitMix64 rng(3);
    std::map<std::uint64_t, double> targets;
    for (int i = 0; i < 200; ++i) {
        const double on = 500.0 + i * 37.5 + rng.uniform(0.0, 5.0);
        const auto id = rig.sched.schedule_note(static_cast<int>(rng.range(30, 90)),
                                                static_cast<int>(rng.range(1, 127)), on, on + 30.0);
        targets[id] = on;
    }
    rig.run_until(9000);
    std::size_t checked = 0;
    std::vector<AcousticEvent> sounded;
    for (const auto& e : rig.inst.log()) {
        if (e.kind == AcousticKind::Sounded) {
            sounded.push_back(e);
        }
    }
    for (const auto& em : rig.emitted) {
        if (em.event.kind == MidiKind::NoteOn) {
            const double actual = em.event.timestamp_ms + model.curve.at(em.event.velocity);
            CHECK(std::abs(actual - em.target_sound_ms) <= 1.0 + 1e-9);
            ++checked;
        }
    }
    CHECK(checked == sounded.size());
    CHECK(checked + rig.dropped.size() == 200);
}

// ---------------------------------------------------------------------------

TEST_CASE("virtual instrument curve and reset rule") {
    InstrumentModel m;
    m.curve.base_ms = 120.0;
    m.curve.slope_ms_per_velocity = 0.6;
    VirtualDisklavier inst(m);
    auto s = inst.receive(MidiEvent::note_on(60, 100, 0), 0);
    REQUIRE(s.size() == 1);
    CHECK(s[0].time_ms == doctest::Approx(60.6));
    inst.receive(MidiEvent::note_off(60, 1000), 1000);
    auto r = inst.receive(MidiEvent::note_on(60, 100, 1030), 1030);
    REQUIRE(r.size() == 1);
    CHECK(r[0].kind == AcousticKind::RejectedRetrigger);
    auto ok = inst.receive(MidiEvent::note_on(60, 100, 1060), 1060);
    CHECK(ok[0].kind == AcousticKind::Sounded);
    CHECK(LatencyCurve{}.at(1) == doctest::Approx(120.0));
    CHECK(LatencyCurve{}.at(127) == doctest::Approx(44.0));
}

TEST_CASE("louder simultaneous sends sound earlier") {
    VirtualDisklavier inst;
    const auto soft = inst.receive(MidiEvent::note_on(60, 20, 0), 0)[0];
    const auto loud = inst.receive(MidiEvent::note_on(62, 120, 0), 0)[0];
    CHECK(loud.time_ms < soft.time_ms);
}

TEST_CASE("acoustic log export is deterministic for a seed") {
    auto run = [](std::uint64_t seed) {
        InstrumentModel m;
        m.jitter_ms = 5.0;
        m.seed = seed;
        VirtualDisklavier inst(m);
        for (int i = 0; i < 50; ++i) {
            inst.receive(MidiEvent::note_on(40 + i, 30 + i, i * 10.0), i * 10.0);
            inst.receive(MidiEvent::note_off(40 + i, i * 10.0 + 5.0), i * 10.0 + 5.0);
        }
        return inst.export_log();
    };
    CHECK(run(1) == run(1));
    CHECK(run(1) != run(2));
    const auto parsed = parse_acoustic_log(run(1));
    CHECK(parsed.size() == 100);
    VirtualDisklavier plain;
    plain.receive(MidiEvent::note_on(60, 127, 0), 0);
    plain.receive(MidiEvent::note_off(60, 10), 10);
    CHECK(plain.export_log() == "Sounded 60 127 44.000\nDamped 60 0 44.000\n");
}

// ---------------------------------------------------------------------------

TEST_CASE("calibration recovers the simulator curve") {
    InstrumentModel m;
    m.curve.base_ms = 120.0;
    m.curve.slope_ms_per_velocity = 0.6;
    VirtualDisklavier inst(m);
    VirtualCalibrationIo io(inst);
    const std::vector<int> probes = {10, 30, 50, 70, 90, 110, 127};
    const auto table = run_calibration(io, probes, 3, "2026-01-01");
    REQUIRE(table.valid());
    for (int v : probes) {
        CHECK(std::abs(table.latency(v) - m.curve.at(v)) <= 1.0);
    }
    CHECK(table.buckets().front().lo == 1);
    CHECK(table.buckets()[0].hi == 20);
    CHECK(table.buckets().back().hi == 127);

    VirtualDisklavier a(m), b(m);
    VirtualCalibrationIo ia(a), ib(b);
    // Noiseless: the written tables differ only in the repeats line.
    auto one = run_calibration(ia, probes, 1, "d");
    auto twenty = run_calibration(ib, probes, 20, "d");
    CHECK(CalibrationTable(one.buckets(), {}).to_text() == CalibrationTable(twenty.buckets(), {}).to_text());
}

TEST_CASE("calibration under jitter averages to the curve") {
    InstrumentModel m;
    m.jitter_ms = 5.0;
    m.seed = 17;
    VirtualDisklavier inst(m);
    VirtualCalibrationIo io(inst);
    const auto table = run_calibration(io, all_velocities(), 50, "d");
    for (int v = 1; v <= 127; ++v) {
        CHECK(std::abs(table.latency(v) - m.curve.at(v)) <= 2.0);
    }
}

TEST_CASE("calibration table text is bit exact and missing probes invalidate it") {
    const CalibrationTable t({{1, 63, 100.0}, {64, 127, 60.25}}, {"virtual-disklavier", "2026-10-17", 5});
    const std::string text = "# meta instrument=virtual-disklavier\n# meta date=2026-10-17\n# meta repeats=5\n"
                             "bucket 1 63 100.000\nbucket 64 127 60.250\n";
    CHECK(t.to_text() == text);
    CHECK(CalibrationTable::parse(text) == t);
    CHECK(t.latency(64) == 60.25);

    struct Deaf : CalibrationIo {
        std::optional<double> probe(int v) override {
            if (v > 100) {
                return std::nullopt;
            }
            return 50.0;
        }
        std::string instrument_id() const override { return "deaf"; }
    } deaf;
    const auto bad = run_calibration(deaf, {50, 120}, 2, "d");
    CHECK_FALSE(bad.valid());
    CHECK_THROWS_AS(bad.latency(10), std::logic_error);
    CHECK(bad.to_text().find("bucket 86 127 -") != std::string::npos);
    CHECK_THROWS_AS(OutputScheduler({}, bad), std::invalid_argument);
    CHECK_FALSE(CalibrationTable({{1, 60, 10.0}, {62, 127, 10.0}}, {}).valid());
}
