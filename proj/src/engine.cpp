#include "duet/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace duet {

const char* to_string(SpeculativePolicy p) {
    switch (p) {
    case SpeculativePolicy::Elapsed:
        return "elapsed";
    case SpeculativePolicy::ElapsedPlusExtension:
        return "elapsed_plus_extension";
    case SpeculativePolicy::ModelPredicted:
        return "model_predicted";
    }
    return "?";
}

const char* to_string(ReclaimFlush f) {
    return f == ReclaimFlush::CutImmediately ? "cut_immediately" : "finish_sounding_notes";
}

const char* to_string(PrefillStrategy s) {
    return s == PrefillStrategy::Continuous ? "continuous" : "one_shot";
}

const char* to_string(Phase p) {
    switch (p) {
    case Phase::Listen:
        return "listen";
    case Phase::Finalizing:
        return "finalizing";
    case Phase::Generating:
        return "generating";
    }
    return "?";
}

void EngineConfig::validate() const {
    tokenizer.validate();
    sampling.validate();
    if (prefill_chunk_tokens <= 0) {
        throw std::invalid_argument("engine.prefill_chunk_tokens must be positive");
    }
    if (max_context_tokens <= 0) {
        throw std::invalid_argument("engine.max_context_tokens must be positive");
    }
    if (prefill_chunk_tokens > max_context_tokens) {
        throw std::invalid_argument("engine.prefill_chunk_tokens must not exceed engine.max_context_tokens");
    }
    if (!(extension_ms >= 0.0)) {
        throw std::invalid_argument("engine.extension_ms must be non-negative");
    }
    if (!(playback_lead_ms >= 0.0) || !(generation_lookahead_ms > 0.0) || !(ai_onset_tolerance_ms >= 0.0)) {
        throw std::invalid_argument("engine timing options must be non-negative (lookahead positive)");
    }
}

// ---------------------------------------------------------------------------

namespace {

std::string opt_ms(const std::optional<double>& v) {
    return v ? fmt::format("{:.3f}", *v) : std::string("-");
}

} // namespace

std::string format_report(const TakeoverReport& r) {
    return fmt::format("event=takeover_report turn={} strategy={} policy={} signal_ms={:.3f} finalize_ms={:.3f} "
                       "first_token_ms={} first_note_sound_ms={} hanging={} residual_tokens={} context_tokens={} "
                       "notes_scheduled={}",
                       r.turn, r.strategy, r.policy, r.signal_time_ms, r.finalize_ms, opt_ms(r.first_token_ms),
                       opt_ms(r.first_note_sound_ms), r.hanging_count, r.residual_tokens, r.context_tokens,
                       r.notes_scheduled);
}

void ObserverList::on_transition(Phase from, Phase to, double t_ms, const std::string& reason) {
    for (auto* o : list_) {
        o->on_transition(from, to, t_ms, reason);
    }
}

void ObserverList::on_report(const TakeoverReport& r) {
    for (auto* o : list_) {
        o->on_report(r);
    }
}

void ObserverList::on_error(const std::string& text, double t_ms) {
    for (auto* o : list_) {
        o->on_error(text, t_ms);
    }
}

void ObserverList::on_human_event(const MidiEvent& ev) {
    for (auto* o : list_) {
        o->on_human_event(ev);
    }
}

void ObserverList::on_ai_note(const AiNoteInfo& info) {
    for (auto* o : list_) {
        o->on_ai_note(info);
    }
}

void EventLog::on_transition(Phase from, Phase to, double t_ms, const std::string& reason) {
    lines_.push_back(fmt::format("event=transition t_ms={:.3f} from={} to={} reason={}", t_ms, to_string(from),
                                 to_string(to), reason));
}

void EventLog::on_report(const TakeoverReport& r) {
    lines_.push_back(format_report(r));
}

void EventLog::on_error(const std::string& text, double t_ms) {
    std::string clean = text;
    std::replace(clean.begin(), clean.end(), '\n', ' ');
    lines_.push_back(fmt::format("event=error t_ms={:.3f} text=\"{}\"", t_ms, clean));
}

std::string EventLog::text() const {
    std::string out;
    for (const auto& l : lines_) {
        out += l;
        out += '\n';
    }
    return out;
}

double speculate_duration(const Note& note, double signal_ms, SpeculativePolicy policy, double extension_ms) {
    if (!note.is_open()) {
        throw std::invalid_argument("speculate_duration: note already has a duration");
    }
    if (!(note.onset_ms < signal_ms)) {
        throw std::invalid_argument("speculate_duration: note starts at or after the signal");
    }
    const double elapsed = signal_ms - note.onset_ms;
    switch (policy) {
    case SpeculativePolicy::Elapsed:
        return elapsed;
    case SpeculativePolicy::ElapsedPlusExtension:
        return elapsed + extension_ms;
    case SpeculativePolicy::ModelPredicted:
        break;
    }
    throw std::invalid_argument("speculate_duration: model-predicted durations need a backend");
}

// ---------------------------------------------------------------------------

DuetEngine::DuetEngine(EngineConfig config, Backend& backend, PlaybackPort& playback, Clock& clock,
                       EngineObserver* observer)
    : config_(std::move(config)),
      vocab_(config_.tokenizer),
      backend_(backend),
      playback_(playback),
      clock_(clock),
      observer_(observer),
      tracker_(config_.tracker),
      builder_(config_.tokenizer) {
    config_.validate();
    session_ = backend_.open_session(vocab_.descriptor());
    builder_.start(staged_);
}

DuetEngine::~DuetEngine() = default;

void DuetEngine::transition(Phase to, const std::string& reason) {
    const Phase from = phase_;
    phase_ = to;
    spdlog::debug("engine: {} -> {} ({})", to_string(from), to_string(to), reason);
    if (observer_) {
        observer_->on_transition(from, to, clock_.now_ms(), reason);
    }
}

void DuetEngine::error(const std::string& text) {
    spdlog::warn("engine: {}", text);
    if (observer_) {
        observer_->on_error(text, clock_.now_ms());
    }
}

Performance DuetEngine::context_performance() const {
    return Performance{tracker_.finalized(), tracker_.pedal_log()};
}

void DuetEngine::advance_input_horizon(double t_ms) {
    last_event_ms_ = std::max(last_event_ms_, t_ms);
}

void DuetEngine::on_event(const MidiEvent& ev) {
    if (phase_ == Phase::Finalizing) {
        deferred_.push_back(ev);
        return;
    }
    ingest(ev);
}

void DuetEngine::ingest(const MidiEvent& raw) {
    try {
        validate(raw);
    } catch (const std::invalid_argument& e) {
        error(std::string("malformed event dropped: ") + e.what());
        return;
    }
    const MidiEvent ev = normalized(raw);
    if (phase_ == Phase::Generating && config_.key_press_reclaim && ev.kind == MidiKind::NoteOn) {
        reclaim(ev.timestamp_ms, "key_press");
    }
    std::vector<TrackerEmission> out;
    try {
        out = tracker_.ingest(ev);
    } catch (const SequencingError& e) {
        error(std::string("event dropped: ") + e.what());
        return;
    }
    last_event_ms_ = std::max(last_event_ms_, ev.timestamp_ms);
    if (observer_ && ev.is_note()) {
        observer_->on_human_event(ev);
    }
    for (const auto& em : out) {
        if (const auto* fin = std::get_if<FinalizedNote>(&em)) {
            enqueue(canonical_note(fin->note, config_.tokenizer));
        } else if (const auto* pc = std::get_if<PedalChange>(&em)) {
            if (observer_) {
                observer_->on_human_event(ev);
            }
            if (pc->event.pedal == Pedal::Sustain) {
                enqueue(canonical_pedal(pc->event, pedal_seq_++, config_.tokenizer));
            }
        } else if (const auto* sig = std::get_if<TakeoverSignal>(&em)) {
            if (phase_ == Phase::Listen) {
                begin_takeover(sig->time_ms);
            } else if (phase_ == Phase::Generating) {
                reclaim(sig->time_ms, "pedal");
            }
        }
    }
}

void DuetEngine::enqueue(const CanonicalEvent& ev) {
    pending_.insert(std::upper_bound(pending_.begin(), pending_.end(), ev), ev);
}

void DuetEngine::encode(const CanonicalEvent& ev) {
    builder_.append(ev, staged_);
    ++events_encoded_;
}

void DuetEngine::prefill_ids(const TokenSeq& toks) {
    if (toks.empty()) {
        return;
    }
    const auto ids = vocab_.ids(toks);
    session_->prefill(TokenBatch{vocab_.descriptor(), ids});
    tokens_prefilled_ += toks.size();
    transcript_.insert(transcript_.end(), toks.begin(), toks.end());
}

void DuetEngine::prefill_staged(std::size_t max_tokens) {
    const std::size_t n = std::min(max_tokens, staged_.size());
    if (n == 0) {
        return;
    }
    TokenSeq chunk(staged_.begin(), staged_.begin() + static_cast<std::ptrdiff_t>(n));
    prefill_ids(chunk);
    staged_.erase(staged_.begin(), staged_.begin() + static_cast<std::ptrdiff_t>(n));
}

void DuetEngine::ensure_session() {
    if (session_) {
        try {
            session_->reset();
            return;
        } catch (const BackendError& e) {
            spdlog::warn("engine: session reset failed ({}), reopening", e.what());
        }
    }
    session_.reset();
    session_ = backend_.open_session(vocab_.descriptor());
}

void DuetEngine::rebuild(std::int64_t origin) {
    ++rebuilds_;
    ensure_session();
    builder_ = TokenStreamBuilder(config_.tokenizer, origin);
    staged_.clear();
    transcript_.clear();
    builder_.start(staged_);
    pending_.clear();
    for (const auto& ev : canonical_events(context_performance(), config_.tokenizer)) {
        if (ev.time >= origin) {
            pending_.push_back(ev);
        }
    }
    needs_rebuild_ = false;
}

std::int64_t DuetEngine::overflow_origin() const {
    const auto events = canonical_events(context_performance(), config_.tokenizer);
    const std::int64_t seg = config_.tokenizer.segment_ms;
    const std::size_t budget = static_cast<std::size_t>(config_.max_context_tokens) / 2;
    std::int64_t origin = builder_.origin_ms();
    const std::int64_t last_seg = events.empty() ? origin : (events.back().time / seg) * seg;
    while (origin < last_seg) {
        std::size_t tokens = 1;
        std::int64_t cur = origin;
        for (const auto& ev : events) {
            if (ev.time < origin) {
                continue;
            }
            tokens += static_cast<std::size_t>((ev.time - cur) / seg);
            cur = origin + ((ev.time - origin) / seg) * seg;
            tokens += ev.kind == CanonicalEvent::Kind::Note ? 3 : 1;
        }
        if (tokens <= budget) {
            break;
        }
        origin += seg;
    }
    return origin;
}

double DuetEngine::watermark_candidate() const {
    double w = last_event_ms_;
    if (const auto open = tracker_.earliest_open_onset()) {
        w = std::min(w, *open);
    }
    for (const auto& [id, n] : ai_notes_) {
        if (n.resolved) {
            continue;
        }
        w = std::min(w, n.info.sounded_ms ? *n.info.sounded_ms : n.info.target_on_ms - config_.ai_onset_tolerance_ms);
    }
    return w;
}

bool DuetEngine::listen_step() {
    if (needs_rebuild_ && !degraded_ && config_.prefill_strategy == PrefillStrategy::Continuous) {
        try {
            rebuild(builder_.origin_ms());
        } catch (const BackendError& e) {
            degraded_ = true;
            error(std::string("context rebuild failed, takeover will prefill in one shot: ") + e.what());
        }
        return true;
    }
    if (config_.prefill_strategy == PrefillStrategy::OneShot || degraded_ || needs_rebuild_) {
        return false;
    }

    const double w = watermark_candidate();
    watermark_ = std::max(watermark_, w);
    const std::int64_t qw = quantize_time(w, config_.tokenizer);
    std::size_t released = 0;
    while (released < pending_.size() && pending_[released].time < qw) {
        const auto& ev = pending_[released];
        if (const auto last = builder_.last(); last && ev < *last) {
            // Something landed behind the prefilled prefix; start over.
            needs_rebuild_ = true;
            break;
        }
        encode(ev);
        ++released;
    }
    pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(released));
    if (needs_rebuild_) {
        return true;
    }
    if (staged_.empty()) {
        return released > 0;
    }
    if (transcript_.size() + staged_.size() > static_cast<std::size_t>(config_.max_context_tokens)) {
        const std::int64_t origin = overflow_origin();
        if (origin > builder_.origin_ms()) {
            spdlog::debug("engine: context over {} tokens, rebuilding from {} ms", config_.max_context_tokens,
                          origin);
            try {
                rebuild(origin);
            } catch (const BackendError& e) {
                degraded_ = true;
                error(std::string("context rebuild failed, takeover will prefill in one shot: ") + e.what());
            }
            return true;
        }
    }
    try {
        prefill_staged(static_cast<std::size_t>(config_.prefill_chunk_tokens));
    } catch (const BackendError& e) {
        degraded_ = true;
        error(std::string("prefill failed, takeover will prefill in one shot: ") + e.what());
    }
    return true;
}

void DuetEngine::begin_takeover(double t) {
    if (!tracker_.any_note_played() && !config_.allow_empty_context) {
        error("takeover declined: nothing has been played yet");
        return;
    }
    signal_ms_ = t;
    transition(Phase::Finalizing, "takeover");
}

std::int64_t DuetEngine::predict_duration(std::int64_t elapsed_q, double elapsed_ms) {
    const Mark m = session_->checkpoint();
    try {
        const TokenId id = session_->decode_next(config_.sampling, DecodeConstraint::Duration);
        const Token tok = vocab_.token(id);
        if (tok.kind != TokenKind::Duration) {
            throw ContractError(fmt::format("expected a duration token, got {}", to_string(tok.kind)));
        }
        if (tok.a >= elapsed_q) {
            session_->release(m);
            transcript_.push_back(tok);
            ++tokens_prefilled_;
            return tok.a;
        }
        session_->rollback(m);
        prefill_ids({Token::duration(static_cast<int>(elapsed_q))});
        return elapsed_q;
    } catch (const ContractError& e) {
        error(std::string("duration prediction failed, using elapsed plus extension: ") + e.what());
    } catch (const std::out_of_range& e) {
        error(std::string("duration prediction returned an unknown token: ") + e.what());
    }
    session_->rollback(m);
    const std::int64_t d = quantize_duration(elapsed_ms + config_.extension_ms, config_.tokenizer);
    prefill_ids({Token::duration(static_cast<int>(d))});
    return d;
}

void DuetEngine::do_takeover() {
    const double t0 = clock_.now_ms();
    const auto& tc = config_.tokenizer;
    ++turn_;
    TakeoverReport report;
    report.turn = turn_;
    report.signal_time_ms = signal_ms_;
    report.policy = to_string(config_.speculative_policy);
    report.strategy = (degraded_ || needs_rebuild_) ? "one_shot_fallback" : to_string(config_.prefill_strategy);

    struct Hanging {
        int pitch = 0;
        double onset = 0.0;
        int velocity = 0;
        std::uint64_t ai_id = 0;
        CanonicalEvent key;
        std::int64_t duration = 0;
    };
    std::vector<Hanging> hanging;
    for (const auto& n : tracker_.hanging_notes(signal_ms_)) {
        hanging.push_back({n.pitch, n.onset_ms, n.velocity, 0, {}, 0});
    }
    for (auto& [id, n] : ai_notes_) {
        if (n.resolved) {
            continue;
        }
        if (n.info.sounded_ms && *n.info.sounded_ms <= signal_ms_) {
            hanging.push_back({n.info.pitch, *n.info.sounded_ms, n.info.velocity, id, {}, 0});
        } else {
            // Not yet audible when control passed; it stays out of the context.
            n.resolved = true;
        }
    }
    for (auto& h : hanging) {
        h.key.kind = CanonicalEvent::Kind::Note;
        h.key.time = quantize_time(h.onset, tc);
        h.key.pitch = h.pitch;
        h.key.bucket = quantize_velocity(h.velocity, tc);
        h.key.duration = std::numeric_limits<std::int64_t>::max();
    }
    std::sort(hanging.begin(), hanging.end(), [](const Hanging& a, const Hanging& b) { return a.key < b.key; });

    try {
        const bool full = degraded_ || needs_rebuild_;
        if (full) {
            rebuild(builder_.origin_ms());
        }
        const auto last = builder_.last();
        const bool behind = last && ((!pending_.empty() && pending_.front() < *last) ||
                                     (!hanging.empty() && hanging.front().key < *last));
        if (behind) {
            rebuild(builder_.origin_ms());
        }
        const std::size_t before = tokens_prefilled_;
        const Mark m0 = session_->checkpoint();

        if (config_.speculative_policy == SpeculativePolicy::ModelPredicted) {
            std::size_t i = 0;
            for (auto& h : hanging) {
                while (i < pending_.size() && pending_[i] < h.key) {
                    encode(pending_[i++]);
                }
                builder_.begin_note(h.key.time, h.key.pitch, h.key.bucket, staged_);
                prefill_staged(staged_.size());
                const double elapsed = signal_ms_ - h.onset;
                h.duration = predict_duration(quantize_duration(elapsed, tc), elapsed);
                TokenSeq already_prefilled;
                builder_.end_note(h.duration, already_prefilled);
                ++events_encoded_;
            }
            while (i < pending_.size()) {
                encode(pending_[i++]);
            }
        } else {
            for (auto& h : hanging) {
                // A note struck exactly at the signal has nothing elapsed yet.
                const double extra =
                    config_.speculative_policy == SpeculativePolicy::Elapsed ? 0.0 : config_.extension_ms;
                const double d = h.onset < signal_ms_
                                     ? speculate_duration(Note{h.pitch, h.onset, std::nullopt, h.velocity},
                                                          signal_ms_, config_.speculative_policy, config_.extension_ms)
                                     : extra;
                h.duration = quantize_duration(d, tc);
                h.key.duration = h.duration;
                enqueue(h.key);
            }
            for (const auto& ev : pending_) {
                encode(ev);
            }
        }
        pending_.clear();
        prefill_staged(staged_.size());
        session_->release(m0);
        gen_mark_ = session_->checkpoint();
        report.residual_tokens = tokens_prefilled_ - before;
        report.context_tokens = session_->cache_len();
        if (full) {
            degraded_ = false;
        }
    } catch (const BackendError& e) {
        error(std::string("backend failure during takeover, back to listening: ") + e.what());
        pending_.clear();
        needs_rebuild_ = true;
        gen_mark_.reset();
        transition(Phase::Listen, "abort");
        while (!deferred_.empty()) {
            const MidiEvent ev = deferred_.front();
            deferred_.pop_front();
            ingest(ev);
        }
        return;
    }

    // Commit the speculative durations.
    for (const auto& h : hanging) {
        const Note n{h.pitch, h.onset, static_cast<double>(h.duration), h.velocity};
        if (h.ai_id == 0) {
            tracker_.close_open(h.pitch, static_cast<double>(h.duration));
        } else {
            tracker_.merge_finalized(n);
            ai_notes_.at(h.ai_id).resolved = true;
        }
    }
    report.hanging_count = static_cast<int>(hanging.size());

    const double gen_start = clock_.now_ms();
    report.finalize_ms = gen_start - t0;
    report_ = report;

    const double res = tc.time_resolution_ms;
    anchor_ms_ = static_cast<double>(quantize_time(signal_ms_, tc));
    shift_ms_ = std::max(0.0, std::ceil((gen_start + config_.playback_lead_ms - anchor_ms_) / res) * res);
    gen_decoder_.emplace(tc, builder_.origin_ms(), builder_.segment_index(), builder_.cursor(), false);
    last_target_ms_ = gen_start;
    turn_tokens_ = 0;
    gen_done_ = false;
    ai_sustain_ = false;
    transition(Phase::Generating, "takeover");

    while (!deferred_.empty()) {
        const MidiEvent ev = deferred_.front();
        deferred_.pop_front();
        ingest(ev);
    }
}

bool DuetEngine::generate_step() {
    if (gen_done_) {
        for (const auto& [id, n] : ai_notes_) {
            if (n.info.turn == turn_ && !n.resolved && !n.released_ms) {
                return false;
            }
        }
        end_turn("complete", false);
        return true;
    }
    const double now = clock_.now_ms();
    if (last_target_ms_ > now + config_.generation_lookahead_ms) {
        return false;
    }
    TokenId id = 0;
    try {
        id = session_->decode_next(config_.sampling);
    } catch (const BackendError& e) {
        error(std::string("decode failed, ending the turn: ") + e.what());
        gen_done_ = true;
        return true;
    }
    if (report_ && !report_->first_token_ms) {
        report_->first_token_ms = clock_.now_ms();
    }
    ++tokens_generated_;
    ++turn_tokens_;
    if (turn_tokens_ >= config_.sampling.max_new_tokens) {
        gen_done_ = true;
    }

    Token tok;
    try {
        tok = vocab_.token(id);
    } catch (const std::out_of_range&) {
        spdlog::warn("engine: backend produced unknown token id {}", id);
        return true;
    }
    const auto out = gen_decoder_->feed(tok);
    if (const auto* dn = std::get_if<Detokenizer::DecodedNote>(&out)) {
        const Note& n = dn->note;
        const double on = std::max(n.onset_ms, anchor_ms_) + shift_ms_;
        const double off = on + *n.duration_ms;
        AiNote rec;
        rec.info.turn = turn_;
        rec.info.pitch = n.pitch;
        rec.info.velocity = n.velocity;
        rec.info.target_on_ms = on;
        rec.info.target_off_ms = off;
        try {
            rec.info.note_id = playback_.play_note(n.pitch, n.velocity, on, off, turn_);
        } catch (const std::exception& e) {
            error(std::string("playback refused a note, ending the turn: ") + e.what());
            gen_done_ = true;
            return true;
        }
        last_target_ms_ = std::max(last_target_ms_, on);
        if (report_) {
            ++report_->notes_scheduled;
        }
        if (observer_) {
            observer_->on_ai_note(rec.info);
        }
        ai_notes_.emplace(rec.info.note_id, rec);
    } else if (const auto* dp = std::get_if<Detokenizer::DecodedPedal>(&out)) {
        const bool down = dp->pedal.state == PedalState::On;
        const double at = std::max(dp->pedal.time_ms, anchor_ms_) + shift_ms_;
        playback_.play_control(config_.tracker.sustain_controller, down ? 127 : 0, at, turn_);
        ai_sustain_ = down;
    } else if (const auto* bad = std::get_if<Detokenizer::Malformed>(&out)) {
        spdlog::warn("engine: skipped malformed generated event ({})", bad->what);
    } else if (std::holds_alternative<Detokenizer::Finished>(out)) {
        gen_done_ = true;
    }
    return true;
}

void DuetEngine::reclaim(double now, const std::string& reason) {
    playback_.cancel_turn(turn_, config_.reclaim_flush == ReclaimFlush::CutImmediately, now);
    end_turn(reason, true);
}

void DuetEngine::end_turn(const std::string& reason, bool cancelled) {
    if (!cancelled && ai_sustain_) {
        playback_.cancel_turn(turn_, false, clock_.now_ms());
    }
    if (gen_mark_) {
        try {
            session_->rollback(*gen_mark_);
        } catch (const BackendError& e) {
            error(std::string("rollback after the turn failed, rebuilding context: ") + e.what());
            needs_rebuild_ = true;
        }
    }
    gen_mark_.reset();
    gen_decoder_.reset();
    ai_sustain_ = false;
    finish_report();
    transition(Phase::Listen, reason);
    for (auto& [id, n] : ai_notes_) {
        if (n.info.turn == turn_ && !n.resolved && n.released_ms) {
            merge_ai(n);
        }
    }
}

void DuetEngine::finish_report() {
    if (!report_) {
        return;
    }
    reports_.push_back(*report_);
    if (observer_) {
        observer_->on_report(*report_);
    }
    report_.reset();
}

void DuetEngine::merge_ai(AiNote& n) {
    n.resolved = true;
    if (!n.info.sounded_ms || !n.released_ms) {
        return;
    }
    const double onset = *n.info.sounded_ms;
    const double dur = std::max(*n.released_ms - onset, 1e-3);
    const Note note{n.info.pitch, onset, dur, n.info.velocity};
    tracker_.merge_finalized(note);
    enqueue(canonical_note(note, config_.tokenizer));
}

void DuetEngine::on_feedback(const PlaybackFeedback& fb) {
    const auto it = ai_notes_.find(fb.note_id);
    if (it == ai_notes_.end()) {
        return;
    }
    AiNote& n = it->second;
    switch (fb.kind) {
    case PlaybackFeedback::Kind::Sounded:
        n.info.sounded_ms = fb.time_ms;
        n.info.status = AiNoteInfo::Status::Sounded;
        if (report_ && report_->turn == n.info.turn) {
            if (!report_->first_note_sound_ms || fb.time_ms < *report_->first_note_sound_ms) {
                report_->first_note_sound_ms = fb.time_ms;
            }
        } else {
            for (auto& r : reports_) {
                if (r.turn == n.info.turn && (!r.first_note_sound_ms || fb.time_ms < *r.first_note_sound_ms)) {
                    r.first_note_sound_ms = fb.time_ms;
                }
            }
        }
        if (observer_) {
            observer_->on_ai_note(n.info);
        }
        break;
    case PlaybackFeedback::Kind::Released:
        n.released_ms = fb.time_ms;
        if (!n.resolved && !(phase_ == Phase::Generating && n.info.turn == turn_)) {
            merge_ai(n);
        }
        break;
    case PlaybackFeedback::Kind::Dropped:
        if (n.info.status != AiNoteInfo::Status::Dropped) {
            n.info.status = AiNoteInfo::Status::Dropped;
            n.resolved = true;
            if (observer_) {
                observer_->on_ai_note(n.info);
            }
        }
        break;
    }
}

bool DuetEngine::poll() {
    switch (phase_) {
    case Phase::Listen:
        return listen_step();
    case Phase::Finalizing:
        do_takeover();
        return true;
    case Phase::Generating:
        return generate_step();
    }
    return false;
}

} // namespace duet
