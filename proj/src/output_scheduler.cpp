#include "duet/output_scheduler.hpp"

#include <algorithm>

namespace duet {

void SchedulerConfig::validate() const {
    if (staleness_threshold_ms < 0.0) {
        throw std::invalid_argument("scheduler: staleness_threshold_ms must be non-negative");
    }
    if (!(retrigger_gap_ms > 0.0)) {
        throw std::invalid_argument("scheduler: retrigger_gap_ms must be positive");
    }
    if (max_pending == 0) {
        throw std::invalid_argument("scheduler: max_pending must be positive");
    }
    if (!(tick_quantum_ms > 0.0)) {
        throw std::invalid_argument("scheduler: tick_quantum_ms must be positive");
    }
}

OutputScheduler::OutputScheduler(SchedulerConfig config, CalibrationTable table)
    : config_(config), table_(std::move(table)) {
    config_.validate();
    if (!table_.valid()) {
        throw std::invalid_argument("scheduler: calibration table invalid: " + table_.problem());
    }
}

std::uint64_t OutputScheduler::push(ScheduledEvent e) {
    e.seq = next_seq_++;
    const auto seq = e.seq;
    events_.emplace(seq, std::move(e));
    pending_.push_back(seq);
    return seq;
}

std::uint64_t OutputScheduler::schedule_note(int pitch, int velocity, double target_on_ms, double target_off_ms,
                                             std::uint32_t tag) {
    if (pitch < 0 || pitch > 127 || velocity < 1 || velocity > 127) {
        throw std::invalid_argument("schedule_note: pitch or velocity out of range");
    }
    if (!(target_off_ms > target_on_ms)) {
        throw std::invalid_argument("schedule_note: target_off must be after target_on");
    }
    if (pending_.size() + 2 > config_.max_pending) {
        throw Backpressure("output queue full (" + std::to_string(pending_.size()) + " pending)");
    }
    const double latency = table_.latency(velocity);
    const double gap = config_.retrigger_gap_ms;
    const double q = config_.tick_quantum_ms;

    double on_send = target_on_ms - latency;
    if (const auto& off = last_off_emit_[static_cast<std::size_t>(pitch)]) {
        on_send = std::max(on_send, *off + gap);
    }
    // Earlier notes on this key must release at least one gap before the new
    // strike; a note may not be cut below one quantum, so the new NoteOn
    // yields instead.
    for (std::uint64_t nid : open_by_pitch_[pitch]) {
        const NoteRec& rec = notes_.at(nid);
        ScheduledEvent& on = ev(rec.on_seq);
        ScheduledEvent& off = ev(rec.off_seq);
        if (off.send_ms <= on_send - gap) {
            continue;
        }
        const double own_on = on.sent_at_ms.value_or(on.send_ms);
        const double floor = std::max(own_on + q, last_tick_ + q);
        const double moved = std::min(off.send_ms, std::max(on_send - gap, floor));
        off.send_ms = moved;
        on_send = std::max(on_send, moved + gap);
    }

    const std::uint64_t note_id = next_note_++;
    ScheduledEvent on;
    on.note_id = note_id;
    on.tag = tag;
    on.payload = MidiEvent::note_on(pitch, velocity, target_on_ms);
    on.requested_target_ms = target_on_ms;
    on.target_sound_ms = on_send + latency;
    on.send_ms = on_send;
    ScheduledEvent off;
    off.note_id = note_id;
    off.tag = tag;
    off.payload = MidiEvent::note_off(pitch, target_off_ms);
    off.requested_target_ms = target_off_ms;
    off.target_sound_ms = target_off_ms;
    off.send_ms = std::max(target_off_ms - config_.note_off_latency_ms, on_send + q);

    NoteRec rec;
    rec.pitch = pitch;
    rec.on_seq = push(std::move(on));
    rec.off_seq = push(std::move(off));
    notes_.emplace(note_id, rec);
    open_by_pitch_[pitch].push_back(note_id);
    return note_id;
}

void OutputScheduler::schedule_control(int controller, int value, double target_ms, std::uint32_t tag) {
    if (pending_.size() + 1 > config_.max_pending) {
        throw Backpressure("output queue full (" + std::to_string(pending_.size()) + " pending)");
    }
    ScheduledEvent e;
    e.tag = tag;
    e.payload = MidiEvent::control(controller, value, target_ms);
    validate(e.payload);
    e.requested_target_ms = target_ms;
    e.target_sound_ms = target_ms;
    e.send_ms = target_ms;
    push(std::move(e));
}

void OutputScheduler::retire(std::uint64_t seq) {
    events_.erase(seq);
}

void OutputScheduler::drop_note(std::uint64_t note_id, bool stale) {
    const NoteRec rec = notes_.at(note_id);
    const ScheduledEvent& on = ev(rec.on_seq);
    dropped_backlog_.push_back(
        DroppedNote{note_id, on.tag, rec.pitch, on.payload.velocity, on.target_sound_ms, stale});
    std::erase(pending_, rec.on_seq);
    std::erase(pending_, rec.off_seq);
    retire(rec.on_seq);
    retire(rec.off_seq);
    notes_.erase(note_id);
    std::erase(open_by_pitch_[rec.pitch], note_id);
}

TickOutput OutputScheduler::tick(double now_ms) {
    TickOutput out;
    if (now_ms < last_tick_) {
        throw std::invalid_argument("scheduler tick time went backwards");
    }
    last_tick_ = now_ms;
    const double gap = config_.retrigger_gap_ms;
    const double q = config_.tick_quantum_ms;

    for (;;) {
        // Earliest due event by (send, seq); re-evaluated after every step
        // because a deferral may reorder the queue.
        std::optional<std::uint64_t> best;
        for (std::uint64_t seq : pending_) {
            const ScheduledEvent& e = events_.at(seq);
            if (e.send_ms > now_ms) {
                continue;
            }
            if (!best) {
                best = seq;
                continue;
            }
            const ScheduledEvent& b = events_.at(*best);
            if (e.send_ms < b.send_ms || (e.send_ms == b.send_ms && e.seq < b.seq)) {
                best = seq;
            }
        }
        if (!best) {
            break;
        }
        ScheduledEvent& e = ev(*best);
        const int pitch = e.payload.pitch;

        if (e.payload.kind == MidiKind::NoteOn) {
            if (now_ms - e.send_ms > config_.staleness_threshold_ms) {
                drop_note(e.note_id, true);
                continue;
            }
            const auto& last_off = last_off_emit_[static_cast<std::size_t>(pitch)];
            if (last_off && now_ms - *last_off < gap) {
                // A NoteOff went out late; hold the strike until the key has
                // had its gap.
                const double shift = *last_off + gap - e.send_ms;
                e.send_ms += shift;
                e.target_sound_ms += shift;
                ScheduledEvent& off = ev(notes_.at(e.note_id).off_seq);
                off.send_ms = std::max(off.send_ms, e.send_ms + q);
                continue;
            }
        }

        std::erase(pending_, e.seq);
        e.state = EventState::Sent;
        e.sent_at_ms = now_ms;
        MidiEvent wire = e.payload;
        wire.timestamp_ms = now_ms;
        Emission em{wire, e.note_id, e.tag, e.send_ms, e.target_sound_ms};
        out.emitted.push_back(em);
        history_.push_back(em);
        if (history_.size() > history_limit_) {
            history_.pop_front();
        }

        if (e.payload.kind == MidiKind::NoteOff) {
            last_off_emit_[static_cast<std::size_t>(pitch)] = now_ms;
            const NoteRec rec = notes_.at(e.note_id);
            retire(rec.on_seq);
            retire(rec.off_seq);
            notes_.erase(e.note_id);
            std::erase(open_by_pitch_[pitch], e.note_id);
        } else if (e.payload.kind == MidiKind::Control) {
            retire(e.seq);
        }
    }
    out.dropped = std::move(dropped_backlog_);
    dropped_backlog_.clear();
    return out;
}

std::size_t OutputScheduler::cancel(const std::function<bool(const ScheduledEvent&)>& pred) {
    std::size_t count = 0;
    const std::vector<std::uint64_t> snapshot = pending_;
    for (std::uint64_t seq : snapshot) {
        auto it = events_.find(seq);
        if (it == events_.end() || it->second.state != EventState::Pending || !pred(it->second)) {
            continue;
        }
        ScheduledEvent& e = it->second;
        if (e.payload.kind == MidiKind::Control) {
            std::erase(pending_, seq);
            retire(seq);
            ++count;
            continue;
        }
        const NoteRec& rec = notes_.at(e.note_id);
        if (ev(rec.on_seq).state == EventState::Sent) {
            continue; // the key is down; its NoteOff must still go out
        }
        drop_note(e.note_id, false);
        count += 2;
    }
    return count;
}

std::size_t OutputScheduler::hurry_offs(double now_ms, const std::function<bool(const ScheduledEvent&)>& pred) {
    std::size_t count = 0;
    for (std::uint64_t seq : pending_) {
        ScheduledEvent& e = ev(seq);
        if (e.payload.kind != MidiKind::NoteOff || !pred(e)) {
            continue;
        }
        if (ev(notes_.at(e.note_id).on_seq).state == EventState::Sent && e.send_ms > now_ms) {
            e.send_ms = now_ms;
            ++count;
        }
    }
    return count;
}

std::size_t OutputScheduler::pending_notes_on() const {
    std::size_t n = 0;
    for (std::uint64_t seq : pending_) {
        if (events_.at(seq).payload.kind == MidiKind::NoteOn) {
            ++n;
        }
    }
    return n;
}

const ScheduledEvent* OutputScheduler::find(std::uint64_t seq) const {
    auto it = events_.find(seq);
    return it == events_.end() ? nullptr : &it->second;
}

std::optional<double> OutputScheduler::next_send_ms() const {
    std::optional<double> best;
    for (std::uint64_t seq : pending_) {
        const double s = events_.at(seq).send_ms;
        if (!best || s < *best) {
            best = s;
        }
    }
    return best;
}

} // namespace duet
