#pragma once

#include <optional>
#include <string>
#include <vector>

#include "duet/virtual_disklavier.hpp"

namespace duet {

struct CalibrationBucket {
    int lo = 1;
    int hi = 127;
    std::optional<double> latency_ms; // empty: not measured

    friend bool operator==(const CalibrationBucket&, const CalibrationBucket&) = default;
};

// Velocity -> actuation latency, as measured on one instrument.
class CalibrationTable {
public:
    struct Meta {
        std::string instrument = "unknown";
        std::string date = "unknown";
        int repeats = 0;

        friend bool operator==(const Meta&, const Meta&) = default;
    };

    CalibrationTable() = default;
    CalibrationTable(std::vector<CalibrationBucket> buckets, Meta meta);

    // One bucket covering 1..127 with a constant latency.
    static CalibrationTable constant(double latency_ms);

    // Buckets partition 1..127 and every bucket is measured with a positive
    // latency.
    bool valid() const;
    std::string problem() const; // empty when valid

    // Throws std::logic_error when the table is not valid.
    double latency(int velocity) const;

    const std::vector<CalibrationBucket>& buckets() const { return buckets_; }
    const Meta& meta() const { return meta_; }

    // Text form: `# meta key=value` header lines then `bucket <lo> <hi> <ms>`,
    // with `-` for an unmeasured latency.
    std::string to_text() const;
    static CalibrationTable parse(const std::string& text); // std::invalid_argument on errors

    friend bool operator==(const CalibrationTable&, const CalibrationTable&) = default;

private:
    std::vector<CalibrationBucket> buckets_;
    Meta meta_;
    std::vector<double> lookup_; // 128 entries when valid
    void build_lookup();
};

// Connection used by run_calibration: sends one probe note and reports the
// measured acoustic onset minus send time, or nothing when no confirmation
// arrived.
class CalibrationIo {
public:
    virtual ~CalibrationIo() = default;
    virtual std::optional<double> probe(int velocity) = 0;
    virtual std::string instrument_id() const = 0;
};

// Probes the virtual instrument on a virtual clock.
class VirtualCalibrationIo : public CalibrationIo {
public:
    explicit VirtualCalibrationIo(VirtualDisklavier& instrument, int pitch = 60);
    std::optional<double> probe(int velocity) override;
    std::string instrument_id() const override { return instrument_.model().id; }

private:
    VirtualDisklavier& instrument_;
    int pitch_;
    double now_ = 0.0;
};

// Buckets are centred on the probe velocities (boundaries at midpoints). Each
// bucket's latency is the mean of `repeats` probes.
CalibrationTable run_calibration(CalibrationIo& io, std::vector<int> velocities, int repeats,
                                 const std::string& date);

std::vector<int> all_velocities();

} // namespace duet
