#include "duet/bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "duet/fixtures.hpp"

namespace duet {

namespace {

constexpr int chord[] = {48, 52, 55, 60, 64, 67, 72, 76, 79, 84};

double ms(const std::optional<double>& t, double signal) {
    return t ? *t - signal : -1.0;
}

} // namespace

BenchConfig::BenchConfig() {
    setup.cost = CostModel{1.0, 1.0};
}

BenchTrace bench_trace(int context_tokens, int hanging, double hang_lead_ms, const EngineConfig& engine) {
    if (context_tokens < 1 || hanging < 0 || hanging > static_cast<int>(std::size(chord)) || hang_lead_ms <= 0.0) {
        throw std::invalid_argument("bench_trace: bad arguments");
    }
    const auto corpus = fixture_corpus();
    TokenStreamBuilder builder(engine.tokenizer);
    TokenSeq toks;
    builder.start(toks);
    std::vector<Note> notes;
    double offset = 0.0;
    double end = 0.0;
    std::array<double, 128> busy_until{};
    for (std::size_t k = 0; static_cast<int>(toks.size()) < context_tokens; ++k) {
        auto piece = corpus[k % corpus.size()].performance.notes;
        for (auto& n : piece) {
            n.onset_ms += offset;
        }
        std::vector<CanonicalEvent> evs;
        for (const auto& n : piece) {
            evs.push_back(canonical_note(n, engine.tokenizer));
        }
        std::vector<std::size_t> order(piece.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return evs[a] < evs[b]; });
        for (auto i : order) {
            if (static_cast<int>(toks.size()) >= context_tokens) {
                break;
            }
            // The tracker would cut an overlapped note short.
            auto& busy = busy_until[static_cast<std::size_t>(piece[i].pitch)];
            if (piece[i].onset_ms < busy) {
                continue;
            }
            busy = piece[i].end_ms();
            builder.append(evs[i], toks);
            notes.push_back(piece[i]);
            end = std::max(end, piece[i].end_ms());
        }
        offset = end + 500.0;
    }
    BenchTrace trace;
    trace.context_tokens = toks.size();
    trace.events = performance_events(Performance{notes, {}}, 0.0, engine.tracker);
    const double chord_on = std::ceil(end) + 200.0;
    for (int i = 0; i < hanging; ++i) {
        trace.events.push_back(MidiEvent::note_on(chord[i], 70, chord_on));
    }
    trace.signal_ms = chord_on + hang_lead_ms;
    trace.events.push_back(MidiEvent::control(engine.tracker.soft_controller, 127, trace.signal_ms));
    return trace;
}

BenchRow run_bench_cell(const BenchConfig& config, PrefillStrategy strategy, int target_tokens, int hanging) {
    SimulationSetup setup = config.setup;
    setup.engine.prefill_strategy = strategy;
    setup.engine.sampling.seed = config.seed;
    const auto trace = bench_trace(target_tokens, hanging, config.hang_lead_ms, setup.engine);
    DuetSimulation sim(setup);
    sim.run(trace.events, trace.signal_ms);
    const double limit = trace.signal_ms + 60000.0;
    auto sounded = [&] {
        const auto r = sim.engine().current_report();
        return !sim.engine().reports().empty() || (r && r->first_note_sound_ms);
    };
    while (!sounded() && sim.clock().now_ms() < limit) {
        sim.advance(sim.clock().now_ms() + 1.0);
    }
    const auto report =
        sim.engine().reports().empty() ? sim.engine().current_report() : sim.engine().reports().front();
    if (!report) {
        throw std::runtime_error(fmt::format("bench: no takeover in cell {} {} {}", to_string(strategy),
                                             target_tokens, hanging));
    }
    const double s = report->signal_time_ms;
    BenchRow row;
    row.strategy = to_string(strategy);
    row.target_tokens = target_tokens;
    row.context_tokens = report->context_tokens;
    row.hanging = report->hanging_count;
    row.residual_tokens = report->residual_tokens;
    row.finalize_ms = report->finalize_ms;
    row.first_token_ms = ms(report->first_token_ms, s);
    row.first_note_sound_ms = ms(report->first_note_sound_ms, s);
    row.native_sound_ms = report->first_token_ms ? row.first_token_ms + config.native_buffer_ms : -1.0;
    return row;
}

BenchReport run_bench(const BenchConfig& config) {
    BenchReport report;
    for (auto strategy : config.strategies) {
        for (int tokens : config.context_tokens) {
            for (int h : config.hanging) {
                report.rows.push_back(run_bench_cell(config, strategy, tokens, h));
            }
        }
    }
    return report;
}

std::string BenchReport::table() const {
    std::string out = fmt::format("{:<11} {:>7} {:>8} {:>7} {:>8} {:>11} {:>14} {:>15} {:>13}\n", "strategy",
                                  "target", "context", "hanging", "residual", "finalize_ms", "first_token_ms",
                                  "first_sound_ms", "native_sound");
    for (const auto& r : rows) {
        out += fmt::format("{:<11} {:>7} {:>8} {:>7} {:>8} {:>11.3f} {:>14.3f} {:>15.3f} {:>13.3f}\n", r.strategy,
                           r.target_tokens, r.context_tokens, r.hanging, r.residual_tokens, r.finalize_ms,
                           r.first_token_ms, r.first_note_sound_ms, r.native_sound_ms);
    }
    return out;
}

std::string BenchReport::tsv() const {
    std::string out = "strategy\ttarget_tokens\tcontext_tokens\thanging\tresidual_tokens\tfinalize_ms\t"
                      "first_token_ms\tfirst_note_sound_ms\tnative_sound_ms\n";
    for (const auto& r : rows) {
        out += fmt::format("{}\t{}\t{}\t{}\t{}\t{:.3f}\t{:.3f}\t{:.3f}\t{:.3f}\n", r.strategy, r.target_tokens,
                           r.context_tokens, r.hanging, r.residual_tokens, r.finalize_ms, r.first_token_ms,
                           r.first_note_sound_ms, r.native_sound_ms);
    }
    return out;
}

const BenchRow* BenchReport::find(const std::string& strategy, int target_tokens, int hanging) const {
    for (const auto& r : rows) {
        if (r.strategy == strategy && r.target_tokens == target_tokens && r.hanging == hanging) {
            return &r;
        }
    }
    return nullptr;
}

} // namespace duet
