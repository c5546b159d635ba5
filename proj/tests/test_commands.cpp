#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "duet/commands.hpp"
#include "duet/smf.hpp"

using namespace duet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / fs::path("duet_test_" + std::to_string(::getpid()) + "_" +
                                                    std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int n = 0;
        return n;
    }
};

std::string slurp(const fs::path& p) {
    const auto b = read_file(p.string());
    return std::string(b.begin(), b.end());
}

struct Capture {
    std::ostringstream out;
    std::ostringstream err;
    CommandIo io() { return CommandIo{out, err, nullptr}; }
};

} // namespace

TEST_CASE("sim writes a session that replays cleanly, identically on every run") {
    TempDir dir;
    AppConfig config;
    SimOptions opt;
    opt.turns = 2;
    Capture a;
    opt.out_dir = (dir.path / "a").string();
    REQUIRE(cmd_sim(config, opt, a.io()) == exit_code::ok);
    Capture b;
    opt.out_dir = (dir.path / "b").string();
    REQUIRE(cmd_sim(config, opt, b.io()) == exit_code::ok);
    for (const char* f : {"acoustic.log", "events.log", "emitted.log", "session.mid"}) {
        CAPTURE(f);
        CHECK(slurp(dir.path / "a" / f) == slurp(dir.path / "b" / f));
    }
    CHECK(a.out.str().find("turns=2") != std::string::npos);
    CHECK(slurp(dir.path / "a" / "acoustic.log").find("Sounded") != std::string::npos);

    Capture r;
    CHECK(cmd_replay(config, (dir.path / "a" / "session.mid").string(), r.io()) == exit_code::ok);
    CHECK(r.out.str().find("violation") == std::string::npos);
}

TEST_CASE("sim follows the soft-pedal presses of an SMF script") {
    TempDir dir;
    const auto phrase = corpus_phrase(4, 3000.0);
    Performance script = phrase;
    script.pedals.push_back(PedalEvent{Pedal::SoftUnaCorda, PedalState::On, 3200.0});
    script.pedals.push_back(PedalEvent{Pedal::SoftUnaCorda, PedalState::Off, 3300.0});
    std::sort(script.pedals.begin(), script.pedals.end(),
              [](const PedalEvent& x, const PedalEvent& y) { return x.time_ms < y.time_ms; });
    const auto path = dir.path / "script.mid";
    write_file(path.string(), save_smf(script.notes, script.pedals, std::vector<bool>(script.notes.size(), false)));
    AppConfig config;
    SimOptions opt;
    opt.script = path.string();
    opt.out_dir = (dir.path / "out").string();
    Capture c;
    REQUIRE(cmd_sim(config, opt, c.io()) == exit_code::ok);
    CHECK(c.out.str().find("turns=1") != std::string::npos);
    CHECK(slurp(dir.path / "out" / "events.log").find("to=generating") != std::string::npos);
}

TEST_CASE("replay flags a retrigger the instrument refuses") {
    TempDir dir;
    AppConfig config;
    config.setup.scheduler.retrigger_gap_ms = 1.0; // far below the simulated key reset time
    std::vector<Note> notes{{60, 1000.0, 100.0, 80}, {60, 1110.0, 100.0, 80}, {62, 1500.0, 200.0, 80}};
    const auto path = dir.path / "s.mid";
    write_file(path.string(), save_smf(notes, {}, {true, true, true}, session_smf_options(TrackerConfig{})));
    Capture c;
    CHECK(cmd_replay(config, path.string(), c.io()) == exit_code::invariant);
    CHECK(c.out.str().find("violation: instrument rejected a retrigger of pitch 60") != std::string::npos);

    AppConfig strict;
    Capture ok;
    CHECK(cmd_replay(strict, path.string(), ok.io()) == exit_code::ok);
    CHECK(ok.out.str().find("notes=3 sounded=3 dropped=0") != std::string::npos);

    Capture missing;
    CHECK(cmd_replay(strict, (dir.path / "none.mid").string(), missing.io()) == exit_code::failure);
}

TEST_CASE("bench and calibrate write their files") {
    TempDir dir;
    AppConfig config;
    config.bench_context_tokens = {300};
    config.bench_hanging = {0, 2};
    Capture c;
    const auto tsv = dir.path / "bench.tsv";
    REQUIRE(cmd_bench(config, tsv.string(), c.io()) == exit_code::ok);
    const auto expected = run_bench(config.bench());
    CHECK(slurp(tsv) == expected.tsv());
    CHECK(c.out.str().rfind(expected.table(), 0) == 0);

    const auto table = dir.path / "cal.txt";
    CalibrateOptions opt;
    opt.out = table.string();
    REQUIRE(cmd_calibrate(config, opt, c.io()) == exit_code::ok);
    CHECK(slurp(table) == table_for(config).to_text());

    // The written table can drive later runs.
    config.calibration_table = table.string();
    CHECK(table_for(config).to_text() == slurp(table));
    config.calibration_table = (dir.path / "missing.txt").string();
    CHECK_THROWS_AS(table_for(config), ConfigError);
}

TEST_CASE("device and config failures map to their exit codes") {
    AppConfig config;
    Capture c;
    CHECK(cmd_run(config, LiveOptions{}, c.io()) == exit_code::device);
    CHECK(c.err.str().find("available ports") != std::string::npos);

    LiveOptions missing;
    missing.midi_in = "/nonexistent/midi_in";
    missing.midi_out = "/nonexistent/midi_out";
    CHECK(cmd_run(config, missing, c.io()) == exit_code::config); // no calibration table yet

    TempDir dir;
    const auto table = dir.path / "cal.txt";
    CalibrateOptions cal;
    cal.out = table.string();
    REQUIRE(cmd_calibrate(config, cal, c.io()) == exit_code::ok);
    config.calibration_table = table.string();
    Capture d;
    CHECK(cmd_run(config, missing, d.io()) == exit_code::device);
    CHECK(d.err.str().find("/nonexistent/midi_out") != std::string::npos);

    CalibrateOptions half;
    half.midi_out = "/nonexistent/midi_out";
    CHECK(cmd_calibrate(config, half, c.io()) == exit_code::device);

    Capture e;
    CHECK(cmd_serve_backend(config, "not-an-address", 10.0, e.io()) == exit_code::config);
}

TEST_CASE("serve-backend and gateway sessions stop on time") {
    AppConfig config;
    config.gateway_bind = "127.0.0.1:0";
    Capture c;
    CHECK(cmd_serve_backend(config, "127.0.0.1:0", 100.0, c.io()) == exit_code::ok);
    CHECK(c.out.str().find("backend serving") != std::string::npos);

    TempDir dir;
    SimOptions opt;
    opt.gateway = true;
    opt.duration_ms = 200.0;
    opt.out_dir = (dir.path / "g").string();
    Capture g;
    CHECK(cmd_sim(config, opt, g.io()) == exit_code::ok);
    CHECK(g.out.str().find("gateway listening on 127.0.0.1:") != std::string::npos);
    CHECK(fs::exists(dir.path / "g" / "session.mid"));
}

TEST_CASE("property: every recorded sim session replays without a violation") {
    TempDir dir;
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        AppConfig config;
        config.setup.engine.sampling.seed = seed;
        config.setup.instrument.jitter_ms = seed % 2 == 0 ? 3.0 : 0.0;
        config.setup.instrument.seed = seed;
        config.setup.engine.reclaim_flush = seed % 3 == 0 ? ReclaimFlush::CutImmediately
                                                           : ReclaimFlush::FinishSoundingNotes;
        SimOptions opt;
        opt.turns = static_cast<int>(1 + seed % 3);
        opt.out_dir = (dir.path / std::to_string(seed)).string();
        Capture c;
        REQUIRE(cmd_sim(config, opt, c.io()) == exit_code::ok);
        Capture r;
        INFO("seed " << seed << ": " << r.out.str());
        CHECK(cmd_replay(config, opt.out_dir + "/session.mid", r.io()) == exit_code::ok);
    }
}
