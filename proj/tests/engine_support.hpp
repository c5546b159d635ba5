#pragma once

#include <deque>
#include <memory>
#include <stdexcept>
#include <vector>

#include "duet/backend.hpp"
#include "duet/engine.hpp"
#include "duet/mock_backend.hpp"
#include "duet/playback.hpp"

namespace duet::test {

// Backend whose decode results are scripted by the test.
struct ScriptState {
    std::deque<TokenId> decode_ids;   // unconstrained decodes; End when empty
    std::deque<TokenId> duration_ids; // constrained decodes
    std::vector<std::size_t> prefill_sizes;
    int fail_prefill_call = -1; // index of the prefill call that fails
    bool poison_on_duration = false;
    bool poisoned = false;
    int opens = 0;
};

class ScriptedSession : public BackendSession {
public:
    ScriptedSession(std::shared_ptr<ScriptState> st, std::string vocab) : st_(std::move(st)), vocab_(std::move(vocab)) {}

    const std::string& vocab_descriptor() const override { return vocab_; }
    std::size_t cache_len() const override { return cache_.size(); }

    std::size_t prefill(const TokenBatch& batch) override {
        check();
        const int call = static_cast<int>(st_->prefill_sizes.size());
        st_->prefill_sizes.push_back(batch.ids.size());
        if (call == st_->fail_prefill_call) {
            st_->poisoned = true;
            throw ConnectionLost("scripted prefill failure");
        }
        cache_.insert(cache_.end(), batch.ids.begin(), batch.ids.end());
        return cache_.size();
    }

    TokenId decode_next(const SamplingParams&, DecodeConstraint constraint) override {
        check();
        auto& q = constraint == DecodeConstraint::Duration ? st_->duration_ids : st_->decode_ids;
        if (constraint == DecodeConstraint::Duration && st_->poison_on_duration) {
            st_->poisoned = true;
            throw BackendTimeout("scripted decode timeout");
        }
        TokenId id = 1;
        if (!q.empty()) {
            id = q.front();
            q.pop_front();
        }
        cache_.push_back(id);
        return id;
    }

    Mark checkpoint() override {
        check();
        marks_.push_back({next_++, cache_.size()});
        return marks_.back();
    }

    void rollback(const Mark& m) override {
        check();
        const auto i = find(m);
        cache_.resize(m.position);
        marks_.resize(i);
    }

    void release(const Mark& m) override {
        check();
        marks_.resize(find(m));
    }

    void reset() override {
        check();
        cache_.clear();
        marks_.clear();
    }

    const std::vector<TokenId>& cache() const { return cache_; }

private:
    void check() const {
        if (st_->poisoned) {
            throw PoisonedSession("scripted session poisoned");
        }
    }
    std::size_t find(const Mark& m) const {
        for (std::size_t i = 0; i < marks_.size(); ++i) {
            if (marks_[i].id == m.id) {
                return i;
            }
        }
        throw ContractError("unknown mark");
    }

    std::shared_ptr<ScriptState> st_;
    std::string vocab_;
    std::vector<TokenId> cache_;
    std::vector<Mark> marks_;
    std::uint64_t next_ = 1;
};

class ScriptedBackend : public Backend {
public:
    std::shared_ptr<ScriptState> state = std::make_shared<ScriptState>();
    ScriptedSession* last = nullptr;

    std::unique_ptr<BackendSession> open_session(const std::string& vocab) override {
        ++state->opens;
        state->poisoned = false;
        auto s = std::make_unique<ScriptedSession>(state, vocab);
        last = s.get();
        return s;
    }
};

// Records what the engine asks to play.
class RecordingPlayback : public PlaybackPort {
public:
    struct Played {
        std::uint64_t id;
        int pitch;
        int velocity;
        double on;
        double off;
        std::uint32_t turn;
    };
    std::vector<Played> notes;
    std::vector<std::tuple<int, int, double>> controls;
    std::vector<std::pair<std::uint32_t, bool>> cancels;

    std::uint64_t play_note(int pitch, int velocity, double on, double off, std::uint32_t turn) override {
        notes.push_back({notes.size() + 1, pitch, velocity, on, off, turn});
        return notes.size();
    }
    void play_control(int controller, int value, double at, std::uint32_t) override {
        controls.emplace_back(controller, value, at);
    }
    void cancel_turn(std::uint32_t turn, bool cut, double) override { cancels.emplace_back(turn, cut); }
};

inline std::shared_ptr<const MarkovModel> default_model() {
    static const auto model = MockBackend::fit_default(TokenizerConfig{});
    return model;
}

} // namespace duet::test
