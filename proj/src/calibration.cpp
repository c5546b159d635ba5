#include "duet/calibration.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace duet {

CalibrationTable::CalibrationTable(std::vector<CalibrationBucket> buckets, Meta meta)
    : buckets_(std::move(buckets)), meta_(std::move(meta)) {
    build_lookup();
}

CalibrationTable CalibrationTable::constant(double latency_ms) {
    return CalibrationTable({CalibrationBucket{1, 127, latency_ms}}, Meta{"constant", "-", 0});
}

std::string CalibrationTable::problem() const {
    int next = 1;
    for (const auto& b : buckets_) {
        if (b.lo != next || b.hi < b.lo) {
            return fmt::format("bucket {}..{} does not continue the partition at {}", b.lo, b.hi, next);
        }
        if (!b.latency_ms) {
            return fmt::format("bucket {}..{} is unmeasured", b.lo, b.hi);
        }
        if (!(*b.latency_ms > 0.0)) {
            return fmt::format("bucket {}..{} has non-positive latency", b.lo, b.hi);
        }
        next = b.hi + 1;
    }
    if (next != 128) {
        return "buckets do not cover velocities up to 127";
    }
    return {};
}

bool CalibrationTable::valid() const {
    return problem().empty();
}

void CalibrationTable::build_lookup() {
    lookup_.clear();
    if (!valid()) {
        return;
    }
    lookup_.assign(128, 0.0);
    for (const auto& b : buckets_) {
        for (int v = b.lo; v <= b.hi; ++v) {
            lookup_[static_cast<std::size_t>(v)] = *b.latency_ms;
        }
    }
    lookup_[0] = lookup_[1];
}

double CalibrationTable::latency(int velocity) const {
    if (lookup_.empty()) {
        throw std::logic_error("calibration table is not valid: " + problem());
    }
    return lookup_[static_cast<std::size_t>(std::clamp(velocity, 0, 127))];
}

std::string CalibrationTable::to_text() const {
    std::string out;
    out += fmt::format("# meta instrument={}\n", meta_.instrument);
    out += fmt::format("# meta date={}\n", meta_.date);
    out += fmt::format("# meta repeats={}\n", meta_.repeats);
    for (const auto& b : buckets_) {
        if (b.latency_ms) {
            out += fmt::format("bucket {} {} {:.3f}\n", b.lo, b.hi, *b.latency_ms);
        } else {
            out += fmt::format("bucket {} {} -\n", b.lo, b.hi);
        }
    }
    return out;
}

CalibrationTable CalibrationTable::parse(const std::string& text) {
    std::vector<CalibrationBucket> buckets;
    Meta meta;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        if (line.rfind("# meta ", 0) == 0) {
            const std::string kv = line.substr(7);
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw std::invalid_argument(fmt::format("calibration line {}: meta needs key=value", lineno));
            }
            const std::string key = kv.substr(0, eq);
            const std::string value = kv.substr(eq + 1);
            if (key == "instrument") {
                meta.instrument = value;
            } else if (key == "date") {
                meta.date = value;
            } else if (key == "repeats") {
                meta.repeats = std::stoi(value);
            }
            continue;
        }
        if (line[0] == '#') {
            continue;
        }
        std::istringstream ls(line);
        std::string word, lat;
        CalibrationBucket b;
        if (!(ls >> word >> b.lo >> b.hi >> lat) || word != "bucket") {
            throw std::invalid_argument(fmt::format("calibration line {}: expected 'bucket lo hi ms'", lineno));
        }
        if (lat != "-") {
            try {
                b.latency_ms = std::stod(lat);
            } catch (const std::exception&) {
                throw std::invalid_argument(fmt::format("calibration line {}: bad latency '{}'", lineno, lat));
            }
        }
        buckets.push_back(b);
    }
    return CalibrationTable(std::move(buckets), meta);
}

VirtualCalibrationIo::VirtualCalibrationIo(VirtualDisklavier& instrument, int pitch)
    : instrument_(instrument), pitch_(pitch) {}

std::optional<double> VirtualCalibrationIo::probe(int velocity) {
    const double send = now_;
    std::optional<double> measured;
    for (const auto& e : instrument_.receive(MidiEvent::note_on(pitch_, velocity, send), send)) {
        if (e.kind == AcousticKind::Sounded) {
            measured = e.time_ms - send;
        }
    }
    // Hold long enough for the hammer to land, then leave the key time to
    // reset before the next probe.
    now_ = send + 400.0;
    instrument_.receive(MidiEvent::note_off(pitch_, now_), now_);
    now_ += 200.0 + instrument_.model().reset_time_ms;
    return measured;
}

std::vector<int> all_velocities() {
    std::vector<int> v(127);
    for (int i = 0; i < 127; ++i) {
        v[static_cast<std::size_t>(i)] = i + 1;
    }
    return v;
}

CalibrationTable run_calibration(CalibrationIo& io, std::vector<int> velocities, int repeats, const std::string& date) {
    if (repeats <= 0) {
        throw std::invalid_argument("calibration: repeats must be positive");
    }
    std::sort(velocities.begin(), velocities.end());
    velocities.erase(std::unique(velocities.begin(), velocities.end()), velocities.end());
    if (velocities.empty() || velocities.front() < 1 || velocities.back() > 127) {
        throw std::invalid_argument("calibration: probe velocities must be non-empty and within 1..127");
    }
    std::vector<CalibrationBucket> buckets;
    for (std::size_t i = 0; i < velocities.size(); ++i) {
        CalibrationBucket b;
        b.lo = i == 0 ? 1 : buckets.back().hi + 1;
        b.hi = i + 1 == velocities.size() ? 127 : (velocities[i] + velocities[i + 1]) / 2;
        // Mean shifted by the first sample, so identical samples average to
        // exactly that sample.
        std::optional<double> first;
        double shifted = 0.0;
        int got = 0;
        for (int r = 0; r < repeats; ++r) {
            if (auto m = io.probe(velocities[i])) {
                if (!first) {
                    first = *m;
                }
                shifted += *m - *first;
                ++got;
            }
        }
        if (got == repeats) {
            b.latency_ms = *first + shifted / repeats;
        } else {
            spdlog::warn("calibration: velocity {} got {}/{} confirmations; bucket {}..{} unmeasured", velocities[i],
                         got, repeats, b.lo, b.hi);
        }
        buckets.push_back(b);
    }
    return CalibrationTable(std::move(buckets), {io.instrument_id(), date, repeats});
}

} // namespace duet
