#pragma once

#include <atomic>
#include <chrono>

namespace duet {

// Monotonic session clock in milliseconds. sleep_ms() is where simulated cost
// is paid, so swapping the clock changes how cost turns into elapsed time.
class Clock {
public:
    virtual ~Clock() = default;
    virtual double now_ms() const = 0;
    virtual void sleep_ms(double ms) = 0;
};

// Real time since construction.
class SteadyClock : public Clock {
public:
    SteadyClock();
    double now_ms() const override;
    void sleep_ms(double ms) override;

private:
    std::chrono::steady_clock::time_point origin_;
};

// A clock that a simulation loop may push forward while idle.
class SteppableClock : public Clock {
public:
    virtual void advance_to(double t_ms) = 0;
};

// Virtual time. Only sleep_ms() and advance_to() move it, so runs driven by it
// are bit-reproducible.
class ManualClock : public SteppableClock {
public:
    explicit ManualClock(double start_ms = 0.0) : now_(start_ms) {}
    double now_ms() const override { return now_.load(); }
    void sleep_ms(double ms) override;
    void advance_to(double t_ms) override;

private:
    std::atomic<double> now_;
};

// Real time plus every sleep, skipped instantly. Measures the real cost of the
// code between sleeps while simulated waits take no wall time.
class SkippingClock : public SteppableClock {
public:
    SkippingClock();
    double now_ms() const override;
    void sleep_ms(double ms) override;
    void advance_to(double t_ms) override;

private:
    std::chrono::steady_clock::time_point origin_;
    std::atomic<double> skipped_{0.0};
};

} // namespace duet
