#pragma once

#include <condition_variable>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "duet/engine.hpp"

namespace duet {

// Live session: callers of submit() are the input side, an inference thread
// owns the engine (and with it the backend session), an output thread ticks
// the playback host once per millisecond. They only share queues.
class LiveRuntime : public EngineInput {
public:
    LiveRuntime(EngineConfig config, Backend& backend, PlaybackHost& host, Clock& clock,
                EngineObserver* observer = nullptr);
    ~LiveRuntime();

    LiveRuntime(const LiveRuntime&) = delete;
    LiveRuntime& operator=(const LiveRuntime&) = delete;

    void start();
    // Joins both threads and rethrows the first exception either one hit.
    void stop();
    bool running() const { return running_; }

    // Stamps ev with the session clock and queues it; returns the stamp.
    // Never waits for inference.
    double submit(const MidiEvent& ev) override;

    // Runs fn on the inference thread between engine steps and waits for it.
    void call(const std::function<void(DuetEngine&)>& fn);

    // Direct access; only while stopped.
    DuetEngine& engine() { return engine_; }
    PlaybackHost& host() { return host_; }

    // Stamp-to-ingest delay of every submitted event, in ms.
    std::vector<double> ingest_delays() const;

private:
    void inference_loop();
    void output_loop();
    void fail(std::exception_ptr e);

    Clock& clock_;
    PlaybackHost& host_;
    QueuedPlayback queue_;
    DuetEngine engine_;

    mutable std::mutex mutex_;
    std::condition_variable wake_;
    std::deque<MidiEvent> input_;
    std::deque<PlaybackFeedback> feedback_;
    std::deque<std::function<void(DuetEngine&)>> calls_;
    std::vector<double> delays_;
    std::exception_ptr error_;
    bool running_ = false;
    bool quit_ = false;
    std::thread inference_;
    std::thread output_;
};

} // namespace duet
