#include "duet/playback.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "duet/midi_device.hpp"

namespace duet {

std::vector<AcousticEvent> VirtualInstrumentSink::send(const MidiEvent& ev, double now_ms) {
    return instrument_.receive(ev, now_ms);
}

MidiDeviceSink::MidiDeviceSink(const std::string& path, int channel) : channel_(channel) {
    fd_ = open_midi_port(path, true);
}

MidiDeviceSink::~MidiDeviceSink() {
    if (fd_ >= 0) {
        ::close(fd_);
    }
}

std::vector<AcousticEvent> MidiDeviceSink::send(const MidiEvent& ev, double) {
    const auto bytes = encode_wire(ev, channel_);
    if (::write(fd_, bytes.data(), bytes.size()) != static_cast<ssize_t>(bytes.size())) {
        spdlog::warn("MIDI output write failed: {}", std::strerror(errno));
    }
    return {};
}

PlaybackHost::PlaybackHost(OutputScheduler& scheduler, OutputSink& sink) : scheduler_(scheduler), sink_(sink) {}

std::uint64_t PlaybackHost::play_note(int pitch, int velocity, double on_ms, double off_ms, std::uint32_t turn) {
    const std::uint64_t id = next_id_++;
    ids_[scheduler_.schedule_note(pitch, velocity, on_ms, off_ms, turn)] = id;
    return id;
}

void PlaybackHost::play_note_as(std::uint64_t id, int pitch, int velocity, double on_ms, double off_ms,
                                std::uint32_t turn) {
    try {
        ids_[scheduler_.schedule_note(pitch, velocity, on_ms, off_ms, turn)] = id;
    } catch (const std::exception& e) {
        spdlog::warn("playback: note refused ({})", e.what());
        add_feedback({PlaybackFeedback::Kind::Dropped, id, scheduler_.last_tick_ms()});
    }
}

void PlaybackHost::play_control(int controller, int value, double at_ms, std::uint32_t turn) {
    scheduler_.schedule_control(controller, value, at_ms, turn);
    if (controller == 64) {
        sustain_turns_[turn] = true;
    }
}

void PlaybackHost::cancel_turn(std::uint32_t turn, bool cut_sounding, double now_ms) {
    auto mine = [turn](const ScheduledEvent& e) { return e.tag == turn; };
    scheduler_.cancel(mine);
    if (cut_sounding) {
        scheduler_.hurry_offs(now_ms, mine);
    }
    if (sustain_turns_.erase(turn) > 0) {
        scheduler_.schedule_control(64, 0, now_ms, turn);
    }
}

void PlaybackHost::add_feedback(PlaybackFeedback fb) {
    const auto pos = std::upper_bound(future_.begin(), future_.end(), fb,
                                      [](const PlaybackFeedback& a, const PlaybackFeedback& b) {
                                          return a.time_ms < b.time_ms;
                                      });
    future_.insert(pos, fb);
}

std::vector<PlaybackFeedback> PlaybackHost::tick(double now_ms) {
    auto out = scheduler_.tick(now_ms);
    for (const auto& d : out.dropped) {
        const auto it = ids_.find(d.note_id);
        if (it != ids_.end()) {
            add_feedback({PlaybackFeedback::Kind::Dropped, it->second, now_ms});
            ids_.erase(it);
        }
    }
    for (auto em : out.emitted) {
        const auto acoustic = sink_.send(em.event, now_ms);
        if (em.note_id == 0) {
            emitted_.push_back(em);
            continue;
        }
        const auto it = ids_.find(em.note_id);
        if (it == ids_.end()) {
            emitted_.push_back(em);
            continue;
        }
        em.note_id = it->second;
        if (em.event.kind == MidiKind::NoteOff) {
            ids_.erase(it);
        }
        emitted_.push_back(em);
        if (!sink_.confirms()) {
            if (em.event.kind == MidiKind::NoteOn) {
                add_feedback({PlaybackFeedback::Kind::Sounded, em.note_id,
                              now_ms + scheduler_.table().latency(em.event.velocity)});
            } else {
                add_feedback({PlaybackFeedback::Kind::Released, em.note_id, now_ms});
            }
            continue;
        }
        for (const auto& a : acoustic) {
            switch (a.kind) {
            case AcousticKind::Sounded:
                add_feedback({PlaybackFeedback::Kind::Sounded, em.note_id, a.time_ms});
                break;
            case AcousticKind::Damped:
                add_feedback({PlaybackFeedback::Kind::Released, em.note_id, a.time_ms});
                break;
            case AcousticKind::RejectedRetrigger:
                add_feedback({PlaybackFeedback::Kind::Dropped, em.note_id, now_ms});
                break;
            }
        }
    }
    std::vector<PlaybackFeedback> due;
    auto it = future_.begin();
    while (it != future_.end() && it->time_ms <= now_ms) {
        due.push_back(*it);
        ++it;
    }
    future_.erase(future_.begin(), it);
    return due;
}

std::uint64_t QueuedPlayback::play_note(int pitch, int velocity, double on_ms, double off_ms, std::uint32_t turn) {
    std::lock_guard lock(mutex_);
    const std::uint64_t id = next_id_++;
    queue_.push_back({Command::Kind::Note, clock_.now_ms(), id, pitch, velocity, on_ms, off_ms, turn, false});
    return id;
}

void QueuedPlayback::play_control(int controller, int value, double at_ms, std::uint32_t turn) {
    std::lock_guard lock(mutex_);
    queue_.push_back({Command::Kind::Control, clock_.now_ms(), 0, controller, value, at_ms, 0.0, turn, false});
}

void QueuedPlayback::cancel_turn(std::uint32_t turn, bool cut_sounding, double now_ms) {
    std::lock_guard lock(mutex_);
    queue_.push_back({Command::Kind::Cancel, clock_.now_ms(), 0, 0, 0, now_ms, 0.0, turn, cut_sounding});
}

bool QueuedPlayback::empty() const {
    std::lock_guard lock(mutex_);
    return queue_.empty();
}

void QueuedPlayback::apply_until(double t_ms, PlaybackHost& host) {
    std::deque<Command> ready;
    {
        std::lock_guard lock(mutex_);
        while (!queue_.empty() && queue_.front().stamp <= t_ms) {
            ready.push_back(queue_.front());
            queue_.pop_front();
        }
    }
    for (const auto& c : ready) {
        switch (c.kind) {
        case Command::Kind::Note:
            host.play_note_as(c.id, c.a, c.b, c.t1, c.t2, c.turn);
            break;
        case Command::Kind::Control:
            host.play_control(c.a, c.b, c.t1, c.turn);
            break;
        case Command::Kind::Cancel:
            host.cancel_turn(c.turn, c.flag, std::max(c.t1, t_ms));
            break;
        }
    }
}

} // namespace duet
