#include "duet/fixtures.hpp"

#include <algorithm>
#include <array>

#include "duet/rng.hpp"

namespace duet {

namespace {

void add(Performance& p, int pitch, double onset, double dur, int vel) {
    p.notes.push_back(Note{std::clamp(pitch, 21, 108), onset, dur, std::clamp(vel, 1, 127)});
}

void pedal(Performance& p, PedalState s, double t) {
    p.pedals.push_back(PedalEvent{Pedal::Sustain, s, t});
}

void finish(Performance& p) {
    sort_by_onset(p.notes);
    std::stable_sort(p.pedals.begin(), p.pedals.end(),
                     [](const PedalEvent& a, const PedalEvent& b) { return a.time_ms < b.time_ms; });
}

} // namespace

Performance andalusian_cadence(int transpose, int bars) {
    // A minor: Am G F E, melody in A Phrygian dominant over the E chord.
    static const std::array<std::array<int, 3>, 4> chords{{{57, 60, 64}, {55, 59, 62}, {53, 57, 60}, {52, 56, 59}}};
    static const std::array<int, 4> bass{45, 43, 41, 40};
    static const std::array<int, 8> scale{64, 65, 68, 69, 71, 72, 74, 76};
    const double bar = 2000.0;
    SplitMix64 rng(0xA11D + static_cast<unsigned>(transpose));
    Performance p;
    int degree = 3;
    for (int b = 0; b < bars; ++b) {
        const int c = b % 4;
        const double t0 = b * bar;
        add(p, bass[c] + transpose, t0, 1900, 70 + static_cast<int>(rng.range(0, 10)));
        for (int beat = 1; beat < 4; ++beat) {
            for (int k = 0; k < 3; ++k) {
                add(p, chords[c][k] + transpose, t0 + beat * 500.0, 380, 52 + static_cast<int>(rng.range(0, 8)));
            }
        }
        for (int e = 0; e < 8; ++e) {
            degree = std::clamp(degree + static_cast<int>(rng.range(-2, 2)), 0, 7);
            const double dur = (e % 4 == 3) ? 460.0 : 230.0;
            add(p, scale[degree] + transpose, t0 + e * 250.0, dur, 78 + static_cast<int>(rng.range(-6, 14)));
        }
    }
    finish(p);
    return p;
}

Performance ragtime_stride(int transpose, int bars) {
    static const std::array<std::array<int, 3>, 4> chords{{{60, 64, 67}, {60, 65, 69}, {59, 62, 67}, {60, 64, 67}}};
    static const std::array<int, 4> roots{36, 41, 43, 36};
    static const std::array<int, 7> melody{72, 74, 76, 79, 81, 84, 76};
    const double beat = 300.0;
    SplitMix64 rng(0x5A6 + static_cast<unsigned>(transpose));
    Performance p;
    for (int b = 0; b < bars; ++b) {
        const int c = b % 4;
        const double t0 = b * 4 * beat;
        for (int q = 0; q < 4; ++q) {
            const double t = t0 + q * beat;
            if (q % 2 == 0) {
                add(p, roots[c] + transpose + (q == 2 ? 7 : 0), t, 260, 84);
            } else {
                for (int k = 0; k < 3; ++k) {
                    add(p, chords[c][k] + transpose - 12, t, 200, 66);
                }
            }
        }
        // Syncopated right hand: eighth, quarter, eighth pattern with ties.
        const std::array<double, 5> at{0, 150, 450, 750, 900};
        const std::array<double, 5> len{140, 290, 290, 140, 290};
        for (std::size_t i = 0; i < at.size(); ++i) {
            const int m = melody[static_cast<std::size_t>(rng.range(0, 6))];
            add(p, m + transpose, t0 + at[i], len[i], 88 + static_cast<int>(rng.range(-8, 12)));
        }
    }
    finish(p);
    return p;
}

Performance hymn_in_three(int transpose, int bars) {
    // Four-part chords on each beat of 3/4, legato pedalling.
    static const std::array<std::array<int, 4>, 6> chords{
        {{48, 55, 64, 72}, {53, 57, 65, 69}, {55, 59, 62, 67}, {48, 57, 64, 72}, {53, 60, 65, 69}, {55, 62, 65, 71}}};
    const double beat = 700.0;
    SplitMix64 rng(0x4E7 + static_cast<unsigned>(transpose));
    Performance p;
    for (int b = 0; b < bars; ++b) {
        const double t0 = b * 3 * beat;
        if (b > 0) {
            pedal(p, PedalState::Off, t0 + 10);
        }
        pedal(p, PedalState::On, t0 + 60);
        for (int q = 0; q < 3; ++q) {
            const auto& ch = chords[static_cast<std::size_t>((b * 3 + q) % 6)];
            for (int k = 0; k < 4; ++k) {
                add(p, ch[static_cast<std::size_t>(k)] + transpose, t0 + q * beat, 640,
                    58 + 4 * k + static_cast<int>(rng.range(0, 6)));
            }
        }
    }
    pedal(p, PedalState::Off, bars * 3 * beat);
    finish(p);
    return p;
}

Performance broken_chords(int transpose, int bars) {
    // I vi IV V arpeggiated in sixteenths, one pedal per bar.
    static const std::array<std::array<int, 4>, 4> chords{{{48, 55, 60, 64}, {45, 52, 57, 60}, {41, 48, 53, 57}, {43, 50, 55, 59}}};
    const double step = 125.0;
    SplitMix64 rng(0xB40C + static_cast<unsigned>(transpose));
    Performance p;
    for (int b = 0; b < bars; ++b) {
        const double t0 = b * 16 * step;
        if (b > 0) {
            pedal(p, PedalState::Off, t0);
        }
        pedal(p, PedalState::On, t0 + 30);
        const auto& ch = chords[static_cast<std::size_t>(b % 4)];
        for (int s = 0; s < 16; ++s) {
            const int idx = s < 8 ? s % 4 : 3 - s % 4;
            const int octave = (s / 4) % 2 == 1 ? 12 : 0;
            add(p, ch[static_cast<std::size_t>(idx)] + octave + transpose, t0 + s * step, 240,
                60 + static_cast<int>(rng.range(0, 20)));
        }
    }
    pedal(p, PedalState::Off, bars * 16 * step);
    finish(p);
    return p;
}

std::vector<NamedPerformance> fixture_corpus() {
    std::vector<NamedPerformance> out;
    for (int t : {0, 2, 5, -3}) {
        const std::string key = std::to_string(t);
        out.push_back({"andalusian" + key, andalusian_cadence(t, 16)});
        out.push_back({"ragtime" + key, ragtime_stride(t, 16)});
        out.push_back({"hymn" + key, hymn_in_three(t, 12)});
        out.push_back({"arpeggio" + key, broken_chords(t, 12)});
    }
    return out;
}

} // namespace duet
