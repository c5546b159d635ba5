#include "duet/clock.hpp"

#include <stdexcept>
#include <thread>

namespace duet {

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point origin) {
    const auto d = std::chrono::steady_clock::now() - origin;
    return std::chrono::duration<double, std::milli>(d).count();
}

} // namespace

SteadyClock::SteadyClock() : origin_(std::chrono::steady_clock::now()) {}

double SteadyClock::now_ms() const {
    return elapsed_ms(origin_);
}

void SteadyClock::sleep_ms(double ms) {
    if (ms > 0.0) {
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
    }
}

void ManualClock::sleep_ms(double ms) {
    if (ms > 0.0) {
        now_.store(now_.load() + ms);
    }
}

void ManualClock::advance_to(double t_ms) {
    if (t_ms < now_.load()) {
        throw std::logic_error("ManualClock cannot move backwards");
    }
    now_.store(t_ms);
}

SkippingClock::SkippingClock() : origin_(std::chrono::steady_clock::now()) {}

double SkippingClock::now_ms() const {
    return elapsed_ms(origin_) + skipped_.load();
}

void SkippingClock::sleep_ms(double ms) {
    if (ms > 0.0) {
        skipped_.store(skipped_.load() + ms);
    }
}

void SkippingClock::advance_to(double t_ms) {
    const double now = now_ms();
    if (t_ms > now) {
        skipped_.store(skipped_.load() + (t_ms - now));
    }
}

} // namespace duet
