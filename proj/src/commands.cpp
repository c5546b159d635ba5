#include "duet/commands.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <map>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "duet/gateway_server.hpp"
#include "duet/midi_device.hpp"
#include "duet/mock_backend.hpp"
#include "duet/remote_backend.hpp"
#include "duet/runtime.hpp"
#include "duet/smf.hpp"

namespace duet {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    const std::vector<std::uint8_t> bytes(text.begin(), text.end());
    write_file(path.string(), bytes);
}

std::string today() {
    const auto t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    return fmt::format("{:04}-{:02}-{:02}", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday);
}

bool should_stop(const CommandIo& io, const SteadyClock& clock, double duration_ms) {
    if (io.stop && io.stop->load()) {
        return true;
    }
    return duration_ms > 0.0 && clock.now_ms() >= duration_ms;
}

template <class Fn>
int guarded(CommandIo& io, Fn fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        io.err << "config error: " << e.what() << "\n";
        return exit_code::config;
    } catch (const DeviceError& e) {
        io.err << "device error: " << e.what() << "\n";
        return exit_code::device;
    } catch (const std::exception& e) {
        io.err << "error: " << e.what() << "\n";
        return exit_code::failure;
    }
}

void write_session(const fs::path& dir, const std::string& acoustic, const std::string& events,
                   const SessionRecorder& rec, const std::vector<Emission>& emitted) {
    fs::create_directories(dir);
    if (!acoustic.empty()) {
        write_text(dir / "acoustic.log", acoustic);
    }
    write_text(dir / "events.log", events);
    std::string em;
    for (const auto& e : emitted) {
        em += fmt::format("{} target={:.3f}\n", to_string(e.event), e.target_sound_ms);
    }
    write_text(dir / "emitted.log", em);
    const auto smf = rec.smf();
    write_file((dir / "session.mid").string(), smf);
}

// Forwards to a runtime created after the gateway core.
struct RuntimeInput : EngineInput {
    LiveRuntime* runtime = nullptr;
    double submit(const MidiEvent& ev) override { return runtime->submit(ev); }
};

struct LiveParts {
    std::unique_ptr<OutputSink> sink;
    VirtualDisklavier* instrument = nullptr;
};

int live_session(const AppConfig& config, const LiveOptions& options, LiveParts parts, CalibrationTable table,
                 CommandIo& io) {
    SteadyClock clock;
    OutputScheduler scheduler(config.setup.scheduler, std::move(table));
    PlaybackHost host(scheduler, *parts.sink);
    auto backend = make_backend(config, clock, false);

    ObserverList observers;
    EventLog log;
    SessionRecorder recorder(config.setup.engine.tracker);
    observers.add(&log);
    observers.add(&recorder);
    RuntimeInput input;
    GatewayConfig gcfg;
    gcfg.outbox_limit = static_cast<std::size_t>(config.gateway_outbox_limit);
    gcfg.tracker = config.setup.engine.tracker;
    gcfg.config_text = dump_config(config);
    GatewayCore core(gcfg, input, clock);
    if (options.gateway) {
        observers.add(&core);
    }
    LiveRuntime runtime(config.setup.engine, *backend, host, clock, &observers);
    input.runtime = &runtime;

    std::unique_ptr<GatewayServer> server;
    if (options.gateway) {
        server = std::make_unique<GatewayServer>(core, RemoteAddress::parse(config.gateway_bind),
                                                 config.gateway_heartbeat_ms);
        server->start();
        io.out << fmt::format("gateway listening on {}:{}\n", RemoteAddress::parse(config.gateway_bind).host,
                              server->port());
    }
    std::unique_ptr<MidiDeviceReader> reader;
    if (!options.midi_in.empty()) {
        reader = std::make_unique<MidiDeviceReader>(options.midi_in, [&](const MidiEvent& ev) { runtime.submit(ev); });
    }
    runtime.start();
    io.out.flush();
    while (!should_stop(io, clock, options.duration_ms)) {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    if (reader) {
        reader->stop();
    }
    if (server) {
        server->stop();
    }
    runtime.stop();

    // Release everything still held before leaving the instrument alone.
    const double now = std::ceil(clock.now_ms());
    scheduler.cancel([](const ScheduledEvent&) { return true; });
    scheduler.hurry_offs(now, [](const ScheduledEvent&) { return true; });
    host.tick(now);
    parts.sink->send(MidiEvent::control(config.setup.engine.tracker.sustain_controller, 0, now), now);

    for (const auto& r : runtime.engine().reports()) {
        io.out << format_report(r) << "\n";
    }
    if (!options.out_dir.empty()) {
        write_session(options.out_dir, parts.instrument ? parts.instrument->export_log() : std::string(),
                      log.text(), recorder, host.emitted());
        io.out << "session written to " << options.out_dir << "\n";
    }
    return exit_code::ok;
}

} // namespace

void SessionRecorder::on_ai_note(const AiNoteInfo& info) {
    if (info.status == AiNoteInfo::Status::Sounded) {
        sounded_.push_back(info);
    } else if (info.status == AiNoteInfo::Status::Dropped) {
        ++dropped_;
    }
}

Performance SessionRecorder::human() const {
    NoteTracker tracker(tracker_);
    for (const auto& ev : human_) {
        tracker.ingest(ev);
    }
    return Performance{tracker.finalized(), tracker.pedal_log()};
}

std::vector<Note> SessionRecorder::generated() const {
    std::vector<Note> out;
    for (const auto& s : sounded_) {
        out.push_back(Note{s.pitch, s.target_on_ms, s.target_off_ms - s.target_on_ms, s.velocity});
    }
    sort_by_onset(out);
    return out;
}

SmfOptions session_smf_options(const TrackerConfig& tracker) {
    SmfOptions o;
    o.ticks_per_quarter = 1000; // half a millisecond per tick
    o.pedals = tracker;
    return o;
}

std::vector<std::uint8_t> SessionRecorder::smf() const {
    auto perf = human();
    std::vector<bool> generated(perf.notes.size(), false);
    for (const auto& n : this->generated()) {
        perf.notes.push_back(n);
        generated.push_back(true);
    }
    return save_smf(perf.notes, perf.pedals, generated, session_smf_options(tracker_));
}

ReplayResult replay_generated(const std::vector<Note>& input, const SimulationSetup& setup,
                              const CalibrationTable& table) {
    ReplayResult res;
    auto notes = input;
    sort_by_onset(notes);
    res.notes = notes.size();
    double residual = 0.0;
    for (int v = 1; v <= 127; ++v) {
        residual = std::max(residual, std::abs(table.latency(v) - setup.instrument.curve.at(v)));
    }
    const double q = setup.scheduler.tick_quantum_ms;
    res.tolerance_ms = q + residual + setup.instrument.jitter_ms;
    if (notes.empty()) {
        return res;
    }

    OutputScheduler sched(setup.scheduler, table);
    VirtualDisklavier instrument(setup.instrument);
    VirtualInstrumentSink sink(instrument);
    constexpr double lookahead = 3000.0;
    double end = 0.0;
    for (const auto& n : notes) {
        end = std::max(end, n.end_ms());
    }
    end += 2000.0;
    std::vector<Emission> emitted;
    std::size_t next = 0;
    for (double t = std::max(0.0, std::floor((notes.front().onset_ms - lookahead) / q) * q); t <= end; t += q) {
        while (next < notes.size() && notes[next].onset_ms - lookahead <= t) {
            const auto& n = notes[next++];
            try {
                sched.schedule_note(n.pitch, n.velocity, n.onset_ms, n.end_ms());
            } catch (const std::exception& e) {
                res.violations.push_back(fmt::format("note {} at {:.3f} refused: {}", n.pitch, n.onset_ms, e.what()));
            }
        }
        auto out = sched.tick(t);
        res.dropped += out.dropped.size();
        for (const auto& e : out.emitted) {
            sink.send(e.event, t);
            emitted.push_back(e);
        }
    }

    std::array<std::optional<double>, 128> last_off{};
    std::array<int, 128> down{};
    std::map<int, std::vector<double>> targets;
    for (const auto& e : emitted) {
        const auto p = static_cast<std::size_t>(e.event.pitch);
        if (e.event.kind == MidiKind::NoteOn) {
            if (last_off[p] && e.event.timestamp_ms - *last_off[p] < setup.scheduler.retrigger_gap_ms - 1e-9) {
                res.violations.push_back(fmt::format("pitch {} re-struck {:.3f} ms after release at {:.3f}",
                                                     e.event.pitch, e.event.timestamp_ms - *last_off[p],
                                                     e.event.timestamp_ms));
            }
            ++down[p];
            targets[e.event.pitch].push_back(e.target_sound_ms);
        } else if (e.event.kind == MidiKind::NoteOff) {
            last_off[p] = e.event.timestamp_ms;
            down[p] = 0;
        }
    }
    for (int p = 0; p < 128; ++p) {
        if (down[static_cast<std::size_t>(p)] > 0) {
            res.violations.push_back(fmt::format("pitch {} never released", p));
        }
    }
    std::map<int, std::size_t> seen;
    for (const auto& a : instrument.log()) {
        if (a.kind == AcousticKind::RejectedRetrigger) {
            res.violations.push_back(fmt::format("instrument rejected a retrigger of pitch {} at {:.3f}", a.pitch,
                                                 a.time_ms));
        } else if (a.kind == AcousticKind::Sounded) {
            ++res.sounded;
            const auto k = seen[a.pitch]++;
            const auto& tv = targets[a.pitch];
            if (k < tv.size()) {
                const double err = std::abs(a.time_ms - tv[k]);
                res.max_error_ms = std::max(res.max_error_ms, err);
                if (err > res.tolerance_ms + 1e-9) {
                    res.violations.push_back(fmt::format("pitch {} sounded at {:.3f}, target {:.3f}", a.pitch,
                                                         a.time_ms, tv[k]));
                }
            }
        }
    }
    if (!instrument.keys_down().empty()) {
        res.violations.push_back(fmt::format("{} keys still down at the end", instrument.keys_down().size()));
    }
    return res;
}

CalibrationTable table_for(const AppConfig& config) {
    if (!config.calibration_table.empty()) {
        std::vector<std::uint8_t> bytes;
        try {
            bytes = read_file(config.calibration_table);
        } catch (const std::exception& e) {
            throw ConfigError(fmt::format("calibration.table: {}", e.what()));
        }
        try {
            auto table = CalibrationTable::parse(std::string(bytes.begin(), bytes.end()));
            if (!table.valid()) {
                throw ConfigError(fmt::format("calibration table {} is incomplete: {}", config.calibration_table,
                                              table.problem()));
            }
            return table;
        } catch (const std::invalid_argument& e) {
            throw ConfigError(fmt::format("calibration table {}: {}", config.calibration_table, e.what()));
        }
    }
    VirtualDisklavier probe(config.setup.instrument);
    VirtualCalibrationIo io(probe);
    return run_calibration(io, all_velocities(), config.setup.calibration_repeats, "simulated");
}

std::unique_ptr<Backend> make_backend(const AppConfig& config, Clock& clock, bool with_cost) {
    if (config.backend == "mock") {
        return std::make_unique<MockBackend>(MockBackend::fit_default(config.setup.engine.tokenizer),
                                             with_cost ? config.setup.cost : CostModel{}, clock);
    }
    return std::make_unique<RemoteBackend>(RemoteAddress::parse(config.backend), config.backend_timeout_ms);
}

int cmd_run(const AppConfig& config, const LiveOptions& options, CommandIo io) {
    return guarded(io, [&] {
        if (options.midi_in.empty() || options.midi_out.empty()) {
            const auto ports = list_midi_ports();
            throw DeviceError(fmt::format("--midi-in and --midi-out are required; available ports: {}",
                                          ports.empty() ? std::string("none") : fmt::format("{}", fmt::join(ports, ", "))));
        }
        if (config.calibration_table.empty()) {
            throw ConfigError("calibration.table is required for a live instrument (run `duet calibrate` first)");
        }
        auto table = table_for(config);
        LiveParts parts;
        parts.sink = std::make_unique<MidiDeviceSink>(options.midi_out, config.midi_channel);
        return live_session(config, options, std::move(parts), std::move(table), io);
    });
}

int cmd_sim(const AppConfig& config, const SimOptions& options, CommandIo io) {
    return guarded(io, [&] {
        if (options.gateway) {
            VirtualDisklavier instrument(config.setup.instrument);
            LiveParts parts;
            parts.sink = std::make_unique<VirtualInstrumentSink>(instrument);
            parts.instrument = &instrument;
            LiveOptions live;
            live.gateway = true;
            live.duration_ms = options.duration_ms;
            live.out_dir = options.out_dir;
            return live_session(config, live, std::move(parts), table_for(config), io);
        }
        SimulationSetup setup = config.setup;
        setup.table = table_for(config);
        ManualClock remote_clock;
        std::unique_ptr<Backend> remote;
        if (config.backend != "mock") {
            remote = make_backend(config, remote_clock, false);
        }
        DuetSimulation sim(setup, remote.get());
        SessionRecorder recorder(setup.engine.tracker);
        sim.add_observer(&recorder);
        if (options.script.empty()) {
            sim.play_alternating(options.turns, 4000.0, 3000.0, setup.engine.sampling.seed);
            sim.settle(sim.clock().now_ms() + 60000.0);
        } else {
            std::vector<MidiEvent> events;
            for (const auto& te : load_smf_events(read_file(options.script))) {
                events.push_back(te.event);
            }
            const double end = (events.empty() ? 0.0 : events.back().timestamp_ms) + 1000.0;
            sim.run(events, end);
            sim.settle(end + 60000.0);
        }
        for (const auto& r : sim.engine().reports()) {
            io.out << format_report(r) << "\n";
        }
        io.out << fmt::format("turns={} generated_sounded={} unsounded={}\n", sim.engine().reports().size(),
                              recorder.generated().size(), recorder.dropped());
        write_session(options.out_dir, sim.instrument().export_log(), sim.log().text(), recorder,
                      sim.host().emitted());
        io.out << "session written to " << options.out_dir << "\n";
        return exit_code::ok;
    });
}

int cmd_calibrate(const AppConfig& config, const CalibrateOptions& options, CommandIo io) {
    return guarded(io, [&] {
        CalibrationTable table;
        if (options.midi_in.empty() && options.midi_out.empty()) {
            VirtualDisklavier instrument(config.setup.instrument);
            VirtualCalibrationIo probe(instrument, options.pitch);
            table = run_calibration(probe, all_velocities(), config.setup.calibration_repeats, "simulated");
        } else {
            if (options.midi_in.empty() || options.midi_out.empty()) {
                throw DeviceError("hardware calibration needs both --midi-in and --midi-out");
            }
            DeviceCalibrationIo probe(options.midi_out, options.midi_in, config.setup.instrument.id, options.pitch,
                                      1000, config.midi_channel);
            table = run_calibration(probe, all_velocities(), config.setup.calibration_repeats, today());
        }
        write_text(options.out, table.to_text());
        io.out << fmt::format("{} buckets written to {}\n", table.buckets().size(), options.out);
        if (!table.valid()) {
            io.err << "table incomplete: " << table.problem() << "\n";
            return exit_code::failure;
        }
        return exit_code::ok;
    });
}

int cmd_bench(const AppConfig& config, const std::string& out_tsv, CommandIo io) {
    return guarded(io, [&] {
        const auto report = run_bench(config.bench());
        io.out << report.table();
        if (!out_tsv.empty()) {
            write_text(out_tsv, report.tsv());
            io.out << "report written to " << out_tsv << "\n";
        }
        return exit_code::ok;
    });
}

int cmd_replay(const AppConfig& config, const std::string& smf_path, CommandIo io) {
    return guarded(io, [&] {
        const auto perf = load_smf(read_file(smf_path), session_smf_options(config.setup.engine.tracker));
        std::vector<Note> generated;
        for (std::size_t i = 0; i < perf.notes.size(); ++i) {
            if (perf.generated[i]) {
                generated.push_back(perf.notes[i]);
            }
        }
        const auto res = replay_generated(generated, config.setup, table_for(config));
        io.out << fmt::format("notes={} sounded={} dropped={} max_error_ms={:.3f} tolerance_ms={:.3f}\n", res.notes,
                              res.sounded, res.dropped, res.max_error_ms, res.tolerance_ms);
        for (const auto& v : res.violations) {
            io.out << "violation: " << v << "\n";
        }
        return res.violations.empty() ? exit_code::ok : exit_code::invariant;
    });
}

int cmd_serve_backend(const AppConfig& config, const std::string& bind, double duration_ms, CommandIo io) {
    return guarded(io, [&] {
        SteadyClock clock;
        MockBackend backend(MockBackend::fit_default(config.setup.engine.tokenizer), CostModel{}, clock);
        RemoteAddress address;
        try {
            address = RemoteAddress::parse(bind);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(fmt::format("--bind: {}", e.what()));
        }
        BackendServer server(backend, address);
        server.start();
        io.out << fmt::format("backend serving {} on port {}\n", Vocabulary(config.setup.engine.tokenizer).descriptor(),
                              server.port());
        io.out.flush();
        while (!should_stop(io, clock, duration_ms)) {
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
        server.stop();
        return exit_code::ok;
    });
}

} // namespace duet
