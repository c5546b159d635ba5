#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "duet/simulation.hpp"

namespace duet {

struct BenchConfig {
    SimulationSetup setup; // engine policy, chunk size, instrument, measured
    std::vector<PrefillStrategy> strategies{PrefillStrategy::OneShot, PrefillStrategy::Continuous};
    std::vector<int> context_tokens{500, 1000, 2000};
    std::vector<int> hanging{0, 3, 8};
    double hang_lead_ms = 300.0; // hanging chord is pressed this long before the signal
    double native_buffer_ms = 500.0;
    std::uint64_t seed = 7;

    BenchConfig();
};

// A human trace whose closed notes tokenize to at least context_tokens
// tokens, followed by a chord of `hanging` notes still held at signal_ms.
struct BenchTrace {
    std::vector<MidiEvent> events; // ends with the soft-pedal press at signal_ms
    double signal_ms = 0.0;
    std::size_t context_tokens = 0; // tokens of the closed notes, Start included
};

BenchTrace bench_trace(int context_tokens, int hanging, double hang_lead_ms, const EngineConfig& engine);

// Latencies relative to the takeover signal.
struct BenchRow {
    std::string strategy;
    int target_tokens = 0;
    std::size_t context_tokens = 0; // cache length when decoding began
    int hanging = 0;
    std::size_t residual_tokens = 0;
    double finalize_ms = 0.0;
    double first_token_ms = 0.0;
    double first_note_sound_ms = 0.0;
    // Same first token through a fixed playback buffer instead of the
    // compensating scheduler.
    double native_sound_ms = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;

    std::string table() const;
    std::string tsv() const;
    const BenchRow* find(const std::string& strategy, int target_tokens, int hanging) const;
};

// Throws std::runtime_error when a cell yields no takeover report.
BenchRow run_bench_cell(const BenchConfig& config, PrefillStrategy strategy, int target_tokens, int hanging);
BenchReport run_bench(const BenchConfig& config);

} // namespace duet
