#pragma once

#include <cstdint>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "duet/backend.hpp"
#include "duet/clock.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

struct CostModel {
    double prefill_ms_per_token = 0.0;
    double decode_ms_per_token = 0.0;

    void validate() const;
};

struct MarkovWeights {
    double trigram = 0.6;
    double bigram = 0.25;
    double unigram = 0.1;
    double uniform = 0.05;
    double onset_delta = 0.7; // share of onset mass given to the step-size model
};

// Order-2 Markov model over token ids with interpolated backoff. Onset and
// pedal offsets are also scored by a histogram of steps from the previous
// event, which keeps generated timing close to the corpus.
class MarkovModel {
public:
    MarkovModel(const Vocabulary& vocab, const std::vector<std::vector<TokenId>>& corpus, MarkovWeights weights = {});

    const Vocabulary& vocab() const { return vocab_; }
    const MarkovWeights& weights() const { return weights_; }

    // Unnormalized interpolated scores for the next token after (p2, p1).
    // A context id of npos means "no token".
    void scores(TokenId p2, TokenId p1, std::vector<double>& out) const;

    // Probability of a step of k grid units between consecutive onsets.
    double step_probability(int k) const;
    int max_step() const { return static_cast<int>(step_hist_.size()) - 1; }

    static constexpr TokenId npos = 0xffffffffu;

private:
    using Row = std::vector<std::pair<TokenId, double>>; // probabilities, sorted by id

    Vocabulary vocab_;
    MarkovWeights weights_;
    std::vector<double> unigram_;
    std::unordered_map<TokenId, Row> bigram_;
    std::unordered_map<std::uint64_t, Row> trigram_;
    std::vector<double> step_hist_;
};

// Token sequences of the bundled corpus (Start ... End) under `vocab`.
std::vector<std::vector<TokenId>> fixture_token_corpus(const Vocabulary& vocab);

// In-process backend over a MarkovModel. Prefill and decode sleep on the
// supplied clock according to the cost model.
class MockBackend : public Backend {
public:
    MockBackend(std::shared_ptr<const MarkovModel> model, CostModel cost, Clock& clock);

    // Model fitted on the fixture corpus for this tokenizer configuration.
    static std::shared_ptr<const MarkovModel> fit_default(const TokenizerConfig& config);

    std::unique_ptr<BackendSession> open_session(const std::string& vocab_descriptor) override;

    const CostModel& cost() const { return cost_; }
    void set_cost(CostModel cost);

private:
    std::shared_ptr<const MarkovModel> model_;
    CostModel cost_;
    Clock& clock_;
};

// Grammar position tracked by the mock so it only proposes well-formed
// continuations.
struct GrammarState {
    enum class Expect : std::uint8_t { Event, Onset, Duration } expect = Expect::Event;
    int cursor = 0;
    bool pedal_down = false;

    void apply(const Token& t);
};

class MockSession : public BackendSession {
public:
    MockSession(std::shared_ptr<const MarkovModel> model, CostModel cost, Clock& clock);

    const std::string& vocab_descriptor() const override { return model_->vocab().descriptor(); }
    std::size_t cache_len() const override { return tokens_.size(); }

    std::size_t prefill(const TokenBatch& batch) override;
    TokenId decode_next(const SamplingParams& params, DecodeConstraint constraint = DecodeConstraint::Any) override;
    Mark checkpoint() override;
    void rollback(const Mark& mark) override;
    void release(const Mark& mark) override;
    void reset() override;

    const std::vector<TokenId>& tokens() const { return tokens_; }
    std::size_t open_marks() const { return marks_.size(); }

private:
    std::size_t find_mark(const Mark& mark) const;
    void push(TokenId id);

    std::shared_ptr<const MarkovModel> model_;
    CostModel cost_;
    Clock& clock_;
    std::vector<TokenId> tokens_;
    std::vector<GrammarState> states_{GrammarState{}}; // states_[i]: after i tokens
    std::vector<Mark> marks_;
    std::uint64_t next_mark_ = 1;
    std::vector<double> scratch_;
};

} // namespace duet
