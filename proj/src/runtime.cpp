#include "duet/runtime.hpp"

#include <cmath>
#include <future>

#include <spdlog/spdlog.h>

namespace duet {

LiveRuntime::LiveRuntime(EngineConfig config, Backend& backend, PlaybackHost& host, Clock& clock,
                         EngineObserver* observer)
    : clock_(clock), host_(host), queue_(clock), engine_(std::move(config), backend, queue_, clock, observer) {}

LiveRuntime::~LiveRuntime() {
    try {
        stop();
    } catch (const std::exception& e) {
        spdlog::warn("runtime stopped with error: {}", e.what());
    }
}

void LiveRuntime::start() {
    std::lock_guard lock(mutex_);
    if (running_) {
        return;
    }
    quit_ = false;
    running_ = true;
    inference_ = std::thread([this] { inference_loop(); });
    output_ = std::thread([this] { output_loop(); });
}

void LiveRuntime::stop() {
    {
        std::lock_guard lock(mutex_);
        if (!running_) {
            return;
        }
        quit_ = true;
    }
    wake_.notify_all();
    inference_.join();
    output_.join();
    std::exception_ptr err;
    {
        std::lock_guard lock(mutex_);
        running_ = false;
        err = std::exchange(error_, nullptr);
        // Calls that never ran must not leave their callers waiting.
        calls_.clear();
    }
    if (err) {
        std::rethrow_exception(err);
    }
}

double LiveRuntime::submit(const MidiEvent& event) {
    MidiEvent ev = event;
    {
        std::lock_guard lock(mutex_);
        ev.timestamp_ms = clock_.now_ms();
        input_.push_back(ev);
    }
    wake_.notify_all();
    return ev.timestamp_ms;
}

void LiveRuntime::call(const std::function<void(DuetEngine&)>& fn) {
    std::promise<void> done;
    auto fut = done.get_future();
    {
        std::lock_guard lock(mutex_);
        if (!running_ || quit_) {
            throw std::logic_error("LiveRuntime::call: not running");
        }
        calls_.push_back([&fn, &done](DuetEngine& e) {
            try {
                fn(e);
                done.set_value();
            } catch (...) {
                done.set_exception(std::current_exception());
            }
        });
    }
    wake_.notify_all();
    fut.get();
}

std::vector<double> LiveRuntime::ingest_delays() const {
    std::lock_guard lock(mutex_);
    return delays_;
}

void LiveRuntime::fail(std::exception_ptr e) {
    std::lock_guard lock(mutex_);
    if (!error_) {
        error_ = e;
    }
    quit_ = true;
    wake_.notify_all();
}

void LiveRuntime::inference_loop() {
    try {
        std::deque<MidiEvent> events;
        std::deque<PlaybackFeedback> feedback;
        std::deque<std::function<void(DuetEngine&)>> calls;
        bool busy = false;
        while (true) {
            double horizon = 0.0;
            {
                std::unique_lock lock(mutex_);
                if (!busy) {
                    wake_.wait_for(lock, std::chrono::milliseconds(1), [this] {
                        return quit_ || !input_.empty() || !feedback_.empty() || !calls_.empty();
                    });
                }
                if (quit_) {
                    break;
                }
                events.swap(input_);
                feedback.swap(feedback_);
                calls.swap(calls_);
                // Anything submitted from here on is stamped later.
                horizon = clock_.now_ms();
            }
            for (const auto& ev : events) {
                engine_.on_event(ev);
                const double delay = clock_.now_ms() - ev.timestamp_ms;
                std::lock_guard lock(mutex_);
                delays_.push_back(delay);
            }
            for (const auto& fb : feedback) {
                engine_.on_feedback(fb);
            }
            engine_.advance_input_horizon(horizon);
            for (auto& fn : calls) {
                fn(engine_);
            }
            events.clear();
            feedback.clear();
            calls.clear();
            busy = engine_.poll();
        }
    } catch (...) {
        fail(std::current_exception());
    }
}

void LiveRuntime::output_loop() {
    try {
        double tick = std::floor(clock_.now_ms());
        while (true) {
            {
                std::lock_guard lock(mutex_);
                if (quit_) {
                    break;
                }
            }
            tick += 1.0;
            const double wait = tick - clock_.now_ms();
            if (wait > 0.0) {
                clock_.sleep_ms(wait);
            }
            queue_.apply_until(tick, host_);
            auto fb = host_.tick(tick);
            if (!fb.empty()) {
                {
                    std::lock_guard lock(mutex_);
                    feedback_.insert(feedback_.end(), fb.begin(), fb.end());
                }
                wake_.notify_all();
            }
        }
    } catch (...) {
        fail(std::current_exception());
    }
}

} // namespace duet
