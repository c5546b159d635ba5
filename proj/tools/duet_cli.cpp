#include <atomic>
#include <csignal>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "duet/commands.hpp"

using namespace duet;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) {
    g_stop = true;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Turn-taking piano duet engine"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string log_level = "warn";
    app.add_option("--config", config_path, "config file (default: $DUET_CONFIG, else built-in defaults)");
    app.add_option("--seed", seed, "sampling seed, overrides sampling.seed")->each([&](const std::string&) {
        seed_set = true;
    });
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

    LiveOptions live;
    auto* run = app.add_subcommand("run", "live session on MIDI device ports");
    run->add_option("--midi-in", live.midi_in, "raw MIDI input device, e.g. /dev/snd/midiC1D0");
    run->add_option("--midi-out", live.midi_out, "raw MIDI output device");
    run->add_flag("--gateway", live.gateway, "also serve the browser gateway");
    run->add_option("--duration-ms", live.duration_ms, "stop after this long (default: until Ctrl-C)");
    run->add_option("--out", live.out_dir, "directory for session files");

    SimOptions sim;
    auto* simc = app.add_subcommand("sim", "session against the simulated instrument");
    simc->add_option("--script", sim.script, "SMF whose soft-pedal presses script the takeovers");
    simc->add_option("--out", sim.out_dir, "directory for session files");
    simc->add_option("--turns", sim.turns, "turns of the built-in duet when no script is given");
    simc->add_flag("--gateway", sim.gateway, "drive a live virtual session from the gateway");
    simc->add_option("--duration-ms", sim.duration_ms, "gateway mode: stop after this long");

    CalibrateOptions cal;
    auto* calc = app.add_subcommand("calibrate", "measure velocity-dependent actuation latency");
    calc->add_option("--midi-in", cal.midi_in, "instrument's MIDI output (key strikes); omit for the simulator");
    calc->add_option("--midi-out", cal.midi_out, "instrument's MIDI input; omit for the simulator");
    calc->add_option("--out", cal.out, "table file to write");
    calc->add_option("--pitch", cal.pitch, "probe key")->check(CLI::Range(0, 127));

    std::string bench_out = "bench.tsv";
    auto* bench = app.add_subcommand("bench", "takeover latency matrix on the mock backend");
    bench->add_option("--out", bench_out, "machine-readable report (tab separated)");

    std::string replay_path;
    auto* replay = app.add_subcommand("replay", "replay a recorded session and check output invariants");
    replay->add_option("smf", replay_path, "session.mid written by sim or run")->required();

    std::string bind = "127.0.0.1:0";
    double serve_ms = 0.0;
    auto* serve = app.add_subcommand("serve-backend", "serve the mock backend over the wire protocol");
    serve->add_option("--bind", bind, "host:port");
    serve->add_option("--duration-ms", serve_ms, "stop after this long (default: until Ctrl-C)");

    auto* gateway = app.add_subcommand("gateway", "browser gateway over a live simulated instrument");
    gateway->add_option("--duration-ms", sim.duration_ms, "stop after this long (default: until Ctrl-C)");
    gateway->add_option("--out", sim.out_dir, "directory for session files");

    auto* keys = app.add_subcommand("config", "print the effective configuration");
    bool key_docs = false;
    keys->add_flag("--keys", key_docs, "list every key with its meaning instead");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_code::ok : exit_code::config;
    }

    spdlog::set_level(spdlog::level::from_str(log_level));
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);

    AppConfig config;
    try {
        const auto path = resolve_config_path(config_path);
        if (!path.empty()) {
            config = load_config(path);
        }
        if (seed_set) {
            config.setup.engine.sampling.seed = seed;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_code::config;
    }

    CommandIo io{std::cout, std::cerr, &g_stop};
    if (*run) {
        return cmd_run(config, live, io);
    }
    if (*simc) {
        return cmd_sim(config, sim, io);
    }
    if (*calc) {
        return cmd_calibrate(config, cal, io);
    }
    if (*bench) {
        return cmd_bench(config, bench_out, io);
    }
    if (*replay) {
        return cmd_replay(config, replay_path, io);
    }
    if (*serve) {
        return cmd_serve_backend(config, bind, serve_ms, io);
    }
    if (*gateway) {
        sim.gateway = true;
        return cmd_sim(config, sim, io);
    }
    if (*keys) {
        if (key_docs) {
            for (const auto& k : config_keys()) {
                std::cout << k.name << "\t" << k.doc << "\n";
            }
            return exit_code::ok;
        }
        std::cout << dump_config(config);
        return exit_code::ok;
    }
    return exit_code::failure;
}
