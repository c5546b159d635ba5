#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "duet/bench.hpp"
#include "duet/config.hpp"
#include "duet/note_tracker.hpp"

using namespace duet;

namespace {

const BenchReport& default_report() {
    static const BenchReport report = run_bench(BenchConfig{});
    return report;
}

} // namespace

TEST_CASE("bench trace tokenizes to the requested context size") {
    EngineConfig engine;
    for (int target : {1, 37, 500, 2000}) {
        for (int hanging : {0, 3, 8}) {
            const auto trace = bench_trace(target, hanging, 300.0, engine);
            // Independent count: replay through a tracker, tokenize the closed notes.
            NoteTracker tracker(engine.tracker);
            int signals = 0;
            for (const auto& ev : trace.events) {
                for (const auto& out : tracker.ingest(ev)) {
                    signals += std::holds_alternative<TakeoverSignal>(out) ? 1 : 0;
                }
            }
            const auto toks = tokenize(tracker.finalized(), {}, engine.tokenizer);
            CHECK(toks.size() == trace.context_tokens);
            CHECK(static_cast<int>(toks.size()) >= target);
            CHECK(static_cast<int>(toks.size()) < target + 4);
            int open = 0;
            for (const auto& o : tracker.state().open_notes) {
                open += o ? 1 : 0;
            }
            CHECK(open == hanging);
            CHECK(signals == 1);
            CHECK(trace.events.back().timestamp_ms == trace.signal_ms);
        }
    }
}

TEST_CASE("bench latencies follow the cost model") {
    const auto& report = default_report();
    REQUIRE(report.rows.size() == 18);
    for (const auto& r : report.rows) {
        CAPTURE(r.strategy);
        CAPTURE(r.target_tokens);
        CAPTURE(r.hanging);
        CHECK(r.hanging <= 8);
        CHECK(r.first_token_ms >= r.finalize_ms);
        CHECK(r.first_note_sound_ms >= r.first_token_ms);
        if (r.hanging == 0) {
            // Oracle: one-shot pays every context token, continuous pays
            // nothing but the first decode step.
            const double prefill = r.strategy == "one_shot" ? static_cast<double>(r.context_tokens) : 0.0;
            CHECK(r.residual_tokens == static_cast<std::size_t>(prefill));
            CHECK(r.finalize_ms == doctest::Approx(prefill));
            CHECK(r.first_token_ms == doctest::Approx(prefill + 1.0));
        }
        CHECK(r.native_sound_ms == doctest::Approx(r.first_token_ms + 500.0));
    }
}

TEST_CASE("continuous prefill never loses to one-shot on a matched cell") {
    const auto& report = default_report();
    for (int tokens : {500, 1000, 2000}) {
        for (int h : {0, 3, 8}) {
            const auto* naive = report.find("one_shot", tokens, h);
            const auto* cont = report.find("continuous", tokens, h);
            REQUIRE(naive);
            REQUIRE(cont);
            CHECK(cont->context_tokens == naive->context_tokens);
            CHECK(cont->finalize_ms <= naive->finalize_ms);
            CHECK(cont->first_token_ms <= naive->first_token_ms);
            CHECK(cont->residual_tokens <= 64 + 3 * static_cast<std::size_t>(h));
        }
    }
    CHECK(report.find("one_shot", 2000, 8)->first_token_ms >= 2000.0);
    CHECK(report.find("continuous", 2000, 8)->first_token_ms <= 150.0);
}

TEST_CASE("bench report is reproducible") {
    const auto again = run_bench(BenchConfig{});
    CHECK(again.tsv() == default_report().tsv());
    CHECK(again.table() == default_report().table());
}

TEST_CASE("bench report formats") {
    BenchReport r;
    r.rows.push_back(BenchRow{"continuous", 500, 502, 3, 10, 13.0, 14.0, 170.25, 514.0});
    CHECK(r.tsv() == "strategy\ttarget_tokens\tcontext_tokens\thanging\tresidual_tokens\tfinalize_ms\t"
                     "first_token_ms\tfirst_note_sound_ms\tnative_sound_ms\n"
                     "continuous\t500\t502\t3\t10\t13.000\t14.000\t170.250\t514.000\n");
    CHECK(r.table().find("continuous      500      502       3       10      13.000") != std::string::npos);
    CHECK(r.find("continuous", 500, 3) == &r.rows[0]);
    CHECK(r.find("one_shot", 500, 3) == nullptr);
}

TEST_CASE("config defaults round-trip through the text form") {
    const AppConfig defaults;
    const auto text = dump_config(defaults);
    CHECK(dump_config(parse_config(text)) == text);
    CHECK(dump_config(parse_config("")) == text);
    // Every key appears once and is documented.
    std::size_t lines = 0;
    for (char c : text) {
        lines += c == '\n' ? 1 : 0;
    }
    CHECK(lines == config_keys().size());
    for (const auto& k : config_keys()) {
        CHECK(!k.doc.empty());
        CHECK(text.find(k.name + " = ") != std::string::npos);
    }
}

TEST_CASE("config parsing sets fields") {
    const auto c = parse_config("# comment\n"
                                "engine.speculative_policy = elapsed   # trailing\n"
                                "engine.prefill_chunk_tokens=32\n"
                                "engine.key_press_reclaim = true\n"
                                "engine.reclaim_flush = cut_immediately\n"
                                "engine.prefill_strategy = one_shot\n"
                                "sampling.seed = 99\n"
                                "scheduler.retrigger_gap_ms = 75.5\n"
                                "bench.context_tokens = 100, 200\n"
                                "backend.address = 127.0.0.1:9000\n"
                                "\n");
    CHECK(c.setup.engine.speculative_policy == SpeculativePolicy::Elapsed);
    CHECK(c.setup.engine.prefill_chunk_tokens == 32);
    CHECK(c.setup.engine.key_press_reclaim);
    CHECK(c.setup.engine.reclaim_flush == ReclaimFlush::CutImmediately);
    CHECK(c.setup.engine.prefill_strategy == PrefillStrategy::OneShot);
    CHECK(c.setup.engine.sampling.seed == 99);
    CHECK(c.setup.scheduler.retrigger_gap_ms == 75.5);
    CHECK(c.bench_context_tokens == std::vector<int>{100, 200});
    CHECK(c.backend == "127.0.0.1:9000");
    const auto b = c.bench();
    CHECK(b.seed == 99);
    CHECK(b.setup.cost.prefill_ms_per_token == 1.0);
    CHECK(b.context_tokens == std::vector<int>{100, 200});
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(parse_config("no_such.key = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("engine.prefill_chunk_tokens\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("engine.prefill_chunk_tokens = 6x\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("engine.prefill_chunk_tokens = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("engine.key_press_reclaim = maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("engine.speculative_policy = guess\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("midi.channel = 16\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("backend.address = nowhere\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("bench.hanging = \n"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/duet.conf"), ConfigError);
    try {
        parse_config("\n\nbogus = 1\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()) == "line 3: unknown key 'bogus'");
    }
}

TEST_CASE("config path resolution prefers the flag over the environment") {
    ::setenv("DUET_CONFIG", "/from/env.conf", 1);
    CHECK(resolve_config_path("/from/flag.conf") == "/from/flag.conf");
    CHECK(resolve_config_path("") == "/from/env.conf");
    ::unsetenv("DUET_CONFIG");
    CHECK(resolve_config_path("").empty());
}
