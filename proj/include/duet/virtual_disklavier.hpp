#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "duet/midi_event.hpp"
#include "duet/rng.hpp"

namespace duet {

// Velocity -> actuation delay. Linear by default; a full per-velocity table
// may replace it.
struct LatencyCurve {
    double base_ms = 120.0;                      // delay at velocity 1
    double slope_ms_per_velocity = 76.0 / 126.0; // 120ms at v=1 down to 44ms at v=127
    std::optional<std::array<double, 128>> table;

    double at(int velocity) const;
};

struct InstrumentModel {
    LatencyCurve curve;
    double reset_time_ms = 60.0;
    double jitter_ms = 0.0; // uniform in [-jitter, +jitter]
    std::uint64_t seed = 1;
    std::string id = "virtual-disklavier";

    void validate() const; // throws std::invalid_argument
};

enum class AcousticKind : std::uint8_t { Sounded, Damped, RejectedRetrigger };

struct AcousticEvent {
    AcousticKind kind = AcousticKind::Sounded;
    int pitch = 0;
    int velocity = 0;
    double time_ms = 0.0;

    friend bool operator==(const AcousticEvent&, const AcousticEvent&) = default;
};

const char* to_string(AcousticKind kind);

// Deterministic simulated player piano. Events must arrive in time order.
class VirtualDisklavier {
public:
    explicit VirtualDisklavier(InstrumentModel model = {});

    std::vector<AcousticEvent> receive(const MidiEvent& ev, double now_ms);

    // Acoustic log sorted by time (ties keep arrival order).
    std::vector<AcousticEvent> log() const;
    std::string export_log() const;

    // Pitches whose key is still held down.
    std::vector<int> keys_down() const;
    std::size_t rejected_count() const { return rejected_; }
    const InstrumentModel& model() const { return model_; }

private:
    struct Key {
        bool down = false;
        double sounded_at = 0.0;
        std::optional<double> released_at;
    };

    InstrumentModel model_;
    SplitMix64 rng_;
    std::array<Key, 128> keys_{};
    std::vector<AcousticEvent> log_;
    std::size_t rejected_ = 0;
    double last_now_ = 0.0;
};

// Parses an exported acoustic log. Throws std::invalid_argument on bad lines.
std::vector<AcousticEvent> parse_acoustic_log(const std::string& text);

} // namespace duet
