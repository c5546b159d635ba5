#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "duet/tokenizer.hpp"

namespace duet::test {

// Independent quantizer: integer arithmetic on the grid, ordering by
// (time, pedal-before-note, pitch, bucket, duration, arrival).
struct OracleEvent {
    std::int64_t time;
    int kind;
    int pitch;
    int bucket;
    std::int64_t dur;
    std::size_t arrival;
    bool on;
};

inline std::vector<OracleEvent> oracle_quantize(const Performance& p, const TokenizerConfig& c) {
    auto grid = [&](double t) {
        const auto k = static_cast<std::int64_t>(std::floor(t / c.time_resolution_ms + 0.5));
        return k * c.time_resolution_ms;
    };
    std::vector<OracleEvent> out;
    std::size_t arrival = 0;
    for (const auto& pe : p.pedals) {
        if (pe.pedal == Pedal::Sustain) {
            out.push_back({grid(pe.time_ms), 0, 0, 0, 0, arrival++, pe.state == PedalState::On});
        }
    }
    for (const auto& n : p.notes) {
        const std::int64_t d =
            std::clamp<std::int64_t>(grid(*n.duration_ms), c.time_resolution_ms, c.max_duration_ms);
        out.push_back({grid(n.onset_ms), 1, n.pitch, n.velocity * c.velocity_buckets / 128, d, 0, false});
    }
    std::stable_sort(out.begin(), out.end(), [](const OracleEvent& a, const OracleEvent& b) {
        return std::tie(a.time, a.kind, a.pitch, a.bucket, a.dur, a.arrival) <
               std::tie(b.time, b.kind, b.pitch, b.bucket, b.dur, b.arrival);
    });
    return out;
}

inline bool matches_oracle(const Performance& decoded, const std::vector<OracleEvent>& oracle, const TokenizerConfig& c) {
    std::size_t ni = 0;
    std::size_t pi = 0;
    for (const auto& o : oracle) {
        if (o.kind == 0) {
            if (pi >= decoded.pedals.size()) {
                return false;
            }
            const auto& pe = decoded.pedals[pi++];
            if (pe.time_ms != static_cast<double>(o.time) || (pe.state == PedalState::On) != o.on) {
                return false;
            }
        } else {
            if (ni >= decoded.notes.size()) {
                return false;
            }
            const auto& n = decoded.notes[ni++];
            if (n.pitch != o.pitch || n.onset_ms != static_cast<double>(o.time) ||
                *n.duration_ms != static_cast<double>(o.dur) || quantize_velocity(n.velocity, c) != o.bucket) {
                return false;
            }
        }
    }
    return ni == decoded.notes.size() && pi == decoded.pedals.size();
}


} // namespace duet::test
