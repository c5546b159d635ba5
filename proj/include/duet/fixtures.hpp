#pragma once

#include <string>
#include <vector>

#include "duet/tokenizer.hpp"

namespace duet {

// Short programmatic piano pieces used to fit the mock backend and to script
// example sessions. All times in ms from 0, fully deterministic.
Performance andalusian_cadence(int transpose, int bars);
Performance ragtime_stride(int transpose, int bars);
Performance hymn_in_three(int transpose, int bars);
Performance broken_chords(int transpose, int bars);

struct NamedPerformance {
    std::string name;
    Performance performance;
};

// The bundled corpus: every piece above in several keys.
std::vector<NamedPerformance> fixture_corpus();

} // namespace duet
