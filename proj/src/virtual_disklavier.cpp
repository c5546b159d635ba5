#include "duet/virtual_disklavier.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace duet {

double LatencyCurve::at(int velocity) const {
    const int v = std::clamp(velocity, 1, 127);
    if (table) {
        return (*table)[static_cast<std::size_t>(v)];
    }
    return base_ms - slope_ms_per_velocity * (v - 1);
}

void InstrumentModel::validate() const {
    for (int v = 1; v <= 127; ++v) {
        if (!(curve.at(v) > 0.0)) {
            throw std::invalid_argument("instrument: latency must be positive for every velocity (v=" +
                                        std::to_string(v) + ")");
        }
    }
    if (!(reset_time_ms > 0.0)) {
        throw std::invalid_argument("instrument: reset_time_ms must be positive");
    }
    if (jitter_ms < 0.0) {
        throw std::invalid_argument("instrument: jitter_ms must be non-negative");
    }
}

const char* to_string(AcousticKind kind) {
    switch (kind) {
    case AcousticKind::Sounded:
        return "Sounded";
    case AcousticKind::Damped:
        return "Damped";
    case AcousticKind::RejectedRetrigger:
        return "RejectedRetrigger";
    }
    return "?";
}

VirtualDisklavier::VirtualDisklavier(InstrumentModel model) : model_(std::move(model)), rng_(model_.seed) {
    model_.validate();
}

std::vector<AcousticEvent> VirtualDisklavier::receive(const MidiEvent& raw, double now_ms) {
    if (now_ms < last_now_) {
        throw std::invalid_argument("virtual instrument: events out of time order");
    }
    last_now_ = now_ms;
    const MidiEvent ev = normalized(raw);
    std::vector<AcousticEvent> out;
    if (!ev.is_note()) {
        return out;
    }
    Key& key = keys_[static_cast<std::size_t>(ev.pitch)];
    if (ev.kind == MidiKind::NoteOn) {
        const bool resetting = key.released_at && now_ms - *key.released_at < model_.reset_time_ms;
        if (key.down || resetting) {
            ++rejected_;
            out.push_back({AcousticKind::RejectedRetrigger, ev.pitch, ev.velocity, now_ms});
        } else {
            double delay = model_.curve.at(ev.velocity);
            if (model_.jitter_ms > 0.0) {
                delay += rng_.uniform(-model_.jitter_ms, model_.jitter_ms);
            }
            key.down = true;
            key.sounded_at = now_ms + std::max(delay, 0.0);
            out.push_back({AcousticKind::Sounded, ev.pitch, ev.velocity, key.sounded_at});
        }
    } else if (key.down) {
        key.down = false;
        key.released_at = now_ms;
        out.push_back({AcousticKind::Damped, ev.pitch, 0, std::max(now_ms, key.sounded_at)});
    }
    log_.insert(log_.end(), out.begin(), out.end());
    return out;
}

std::vector<AcousticEvent> VirtualDisklavier::log() const {
    std::vector<AcousticEvent> sorted = log_;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const AcousticEvent& a, const AcousticEvent& b) { return a.time_ms < b.time_ms; });
    return sorted;
}

std::string VirtualDisklavier::export_log() const {
    std::string out;
    for (const auto& e : log()) {
        out += fmt::format("{} {} {} {:.3f}\n", to_string(e.kind), e.pitch, e.velocity, e.time_ms);
    }
    return out;
}

std::vector<int> VirtualDisklavier::keys_down() const {
    std::vector<int> out;
    for (int p = 0; p < 128; ++p) {
        if (keys_[static_cast<std::size_t>(p)].down) {
            out.push_back(p);
        }
    }
    return out;
}

std::vector<AcousticEvent> parse_acoustic_log(const std::string& text) {
    std::vector<AcousticEvent> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        std::string kind;
        AcousticEvent e;
        if (!(ls >> kind >> e.pitch >> e.velocity >> e.time_ms)) {
            throw std::invalid_argument("bad acoustic log line: " + line);
        }
        if (kind == "Sounded") {
            e.kind = AcousticKind::Sounded;
        } else if (kind == "Damped") {
            e.kind = AcousticKind::Damped;
        } else if (kind == "RejectedRetrigger") {
            e.kind = AcousticKind::RejectedRetrigger;
        } else {
            throw std::invalid_argument("unknown acoustic event kind: " + kind);
        }
        out.push_back(e);
    }
    return out;
}

} // namespace duet
