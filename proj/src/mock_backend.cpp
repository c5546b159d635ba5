#include "duet/mock_backend.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "duet/fixtures.hpp"
#include "duet/rng.hpp"

namespace duet {

void SamplingParams::validate() const {
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("sampling: temperature must be positive");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw std::invalid_argument("sampling: top_p must be in (0, 1]");
    }
    if (max_new_tokens <= 0) {
        throw std::invalid_argument("sampling: max_new_tokens must be positive");
    }
}

void CostModel::validate() const {
    if (prefill_ms_per_token < 0.0 || decode_ms_per_token < 0.0) {
        throw std::invalid_argument("cost model: costs must be non-negative");
    }
}

void GrammarState::apply(const Token& t) {
    switch (t.kind) {
    case TokenKind::Start:
        *this = GrammarState{};
        break;
    case TokenKind::End:
        expect = Expect::Event;
        break;
    case TokenKind::Segment:
        cursor = 0;
        break;
    case TokenKind::Note:
        expect = Expect::Onset;
        break;
    case TokenKind::Onset:
        cursor = t.a;
        expect = Expect::Duration;
        break;
    case TokenKind::Duration:
        expect = Expect::Event;
        break;
    case TokenKind::PedalOn:
        cursor = t.a;
        pedal_down = true;
        break;
    case TokenKind::PedalOff:
        cursor = t.a;
        pedal_down = false;
        break;
    }
}

// ---------------------------------------------------------------------------

namespace {

constexpr int max_step_units = 200;

std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

template <typename Key>
std::unordered_map<Key, std::vector<std::pair<TokenId, double>>> normalize_rows(
    const std::map<Key, std::map<TokenId, double>>& counts) {
    std::unordered_map<Key, std::vector<std::pair<TokenId, double>>> rows;
    for (const auto& [key, row] : counts) {
        double total = 0.0;
        for (const auto& [id, c] : row) {
            total += c;
        }
        auto& out = rows[key];
        for (const auto& [id, c] : row) {
            out.emplace_back(id, c / total);
        }
    }
    return rows;
}

} // namespace

MarkovModel::MarkovModel(const Vocabulary& vocab, const std::vector<std::vector<TokenId>>& corpus,
                         MarkovWeights weights)
    : vocab_(vocab), weights_(weights), unigram_(vocab.size(), 0.0), step_hist_(max_step_units + 1, 0.0) {
    std::map<TokenId, std::map<TokenId, double>> bi;
    std::map<std::uint64_t, std::map<TokenId, double>> tri;
    double total = 0.0;
    const int res = vocab.config().time_resolution_ms;
    const int per_seg = vocab.config().offsets_per_segment();

    for (const auto& seq : corpus) {
        GrammarState g;
        std::int64_t segment = 0;
        std::int64_t prev_units = 0;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            const TokenId id = seq[i];
            if (id >= vocab.size()) {
                throw std::invalid_argument("corpus token outside vocabulary");
            }
            unigram_[id] += 1.0;
            total += 1.0;
            if (i >= 1) {
                bi[seq[i - 1]][id] += 1.0;
            }
            if (i >= 2) {
                tri[pair_key(seq[i - 2], seq[i - 1])][id] += 1.0;
            }
            const Token t = vocab.token(id);
            if (t.kind == TokenKind::Start) {
                segment = 0;
                prev_units = 0;
            } else if (t.kind == TokenKind::Segment) {
                ++segment;
            } else if (t.kind == TokenKind::Onset || t.kind == TokenKind::PedalOn || t.kind == TokenKind::PedalOff) {
                const std::int64_t units = segment * per_seg + t.a / res;
                const auto step = std::clamp<std::int64_t>(units - prev_units, 0, max_step_units);
                step_hist_[static_cast<std::size_t>(step)] += 1.0;
                prev_units = units;
            }
            g.apply(t);
        }
    }
    if (total > 0.0) {
        for (double& u : unigram_) {
            u /= total;
        }
    }
    double steps = 0.0;
    for (double s : step_hist_) {
        steps += s;
    }
    for (double& s : step_hist_) {
        s = steps > 0.0 ? s / steps : 1.0 / static_cast<double>(step_hist_.size());
    }
    bigram_ = normalize_rows(bi);
    trigram_ = normalize_rows(tri);
}

void MarkovModel::scores(TokenId p2, TokenId p1, std::vector<double>& out) const {
    const std::size_t n = vocab_.size();
    out.assign(n, weights_.uniform / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        out[i] += weights_.unigram * unigram_[i];
    }
    if (p1 != npos) {
        if (auto it = bigram_.find(p1); it != bigram_.end()) {
            for (const auto& [id, p] : it->second) {
                out[id] += weights_.bigram * p;
            }
        }
        if (p2 != npos) {
            if (auto it = trigram_.find(pair_key(p2, p1)); it != trigram_.end()) {
                for (const auto& [id, p] : it->second) {
                    out[id] += weights_.trigram * p;
                }
            }
        }
    }
}

double MarkovModel::step_probability(int k) const {
    if (k < 0 || k >= static_cast<int>(step_hist_.size())) {
        return 0.0;
    }
    return step_hist_[static_cast<std::size_t>(k)];
}

std::vector<std::vector<TokenId>> fixture_token_corpus(const Vocabulary& vocab) {
    std::vector<std::vector<TokenId>> out;
    for (const auto& piece : fixture_corpus()) {
        TokenSeq toks = tokenize(piece.performance.notes, piece.performance.pedals, vocab.config());
        toks.push_back(Token::end());
        out.push_back(vocab.ids(toks));
    }
    return out;
}

// ---------------------------------------------------------------------------

MockBackend::MockBackend(std::shared_ptr<const MarkovModel> model, CostModel cost, Clock& clock)
    : model_(std::move(model)), cost_(cost), clock_(clock) {
    cost_.validate();
}

std::shared_ptr<const MarkovModel> MockBackend::fit_default(const TokenizerConfig& config) {
    const Vocabulary vocab(config);
    return std::make_shared<const MarkovModel>(vocab, fixture_token_corpus(vocab));
}

std::unique_ptr<BackendSession> MockBackend::open_session(const std::string& vocab_descriptor) {
    if (vocab_descriptor != model_->vocab().descriptor()) {
        throw VocabMismatch("mock backend serves '" + model_->vocab().descriptor() + "', asked for '" +
                            vocab_descriptor + "'");
    }
    return std::make_unique<MockSession>(model_, cost_, clock_);
}

void MockBackend::set_cost(CostModel cost) {
    cost.validate();
    cost_ = cost;
}

// ---------------------------------------------------------------------------

MockSession::MockSession(std::shared_ptr<const MarkovModel> model, CostModel cost, Clock& clock)
    : model_(std::move(model)), cost_(cost), clock_(clock) {}

void MockSession::push(TokenId id) {
    GrammarState g = states_.back();
    g.apply(model_->vocab().token(id));
    tokens_.push_back(id);
    states_.push_back(g);
}

std::size_t MockSession::prefill(const TokenBatch& batch) {
    if (batch.vocab != vocab_descriptor()) {
        throw VocabMismatch("prefill with vocabulary '" + std::string(batch.vocab) + "' on session '" +
                            vocab_descriptor() + "'");
    }
    if (batch.ids.empty()) {
        throw ContractError("prefill of zero tokens");
    }
    const auto size = model_->vocab().size();
    for (TokenId id : batch.ids) {
        if (id >= size) {
            throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
        }
    }
    for (TokenId id : batch.ids) {
        push(id);
    }
    clock_.sleep_ms(cost_.prefill_ms_per_token * static_cast<double>(batch.ids.size()));
    return tokens_.size();
}

TokenId MockSession::decode_next(const SamplingParams& params, DecodeConstraint constraint) {
    if (tokens_.empty()) {
        throw ContractError("decode on empty cache");
    }
    params.validate();
    const Vocabulary& vocab = model_->vocab();
    const int res = vocab.config().time_resolution_ms;
    const TokenId p1 = tokens_.back();
    const TokenId p2 = tokens_.size() >= 2 ? tokens_[tokens_.size() - 2] : MarkovModel::npos;
    model_->scores(p2, p1, scratch_);

    const GrammarState& g = states_.back();
    const auto cursor_units = static_cast<TokenId>(g.cursor / res);
    std::vector<double> masked(scratch_.size(), 0.0);
    auto keep = [&](TokenId lo, TokenId hi) {
        for (TokenId i = lo; i < hi; ++i) {
            masked[i] = scratch_[i];
        }
    };
    if (constraint == DecodeConstraint::Duration || g.expect == GrammarState::Expect::Duration) {
        keep(vocab.duration_base(), vocab.pedal_on_base());
    } else if (g.expect == GrammarState::Expect::Onset) {
        const double w = model_->weights().onset_delta;
        double total = 0.0;
        for (TokenId i = vocab.onset_base() + cursor_units; i < vocab.duration_base(); ++i) {
            total += scratch_[i];
        }
        for (TokenId i = vocab.onset_base() + cursor_units; i < vocab.duration_base(); ++i) {
            const int step = static_cast<int>(i - vocab.onset_base() - cursor_units);
            masked[i] = (1.0 - w) * scratch_[i] / total + w * model_->step_probability(step);
        }
    } else {
        masked[1] = scratch_[1];
        masked[2] = scratch_[2];
        keep(vocab.note_base(), vocab.onset_base());
        if (g.pedal_down) {
            keep(vocab.pedal_off_base() + cursor_units, static_cast<TokenId>(vocab.size()));
        } else {
            keep(vocab.pedal_on_base() + cursor_units, vocab.pedal_off_base());
        }
    }

    TokenId chosen = 0;
    if (params.temperature <= 1e-6) {
        double best = -1.0;
        for (TokenId i = 0; i < masked.size(); ++i) {
            if (masked[i] > best) {
                best = masked[i];
                chosen = i;
            }
        }
    } else {
        std::vector<std::pair<double, TokenId>> cand;
        double total = 0.0;
        for (TokenId i = 0; i < masked.size(); ++i) {
            if (masked[i] > 0.0) {
                const double p = params.temperature == 1.0 ? masked[i] : std::pow(masked[i], 1.0 / params.temperature);
                cand.emplace_back(p, i);
                total += p;
            }
        }
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        double kept = 0.0;
        std::size_t n = 0;
        while (n < cand.size()) {
            kept += cand[n].first;
            ++n;
            if (kept >= params.top_p * total) {
                break;
            }
        }
        std::uint64_t h = mix64(params.seed) ^ static_cast<std::uint64_t>(tokens_.size());
        h = mix64(h) ^ pair_key(p2, p1);
        SplitMix64 rng(mix64(h));
        const double target = rng.uniform() * kept;
        double acc = 0.0;
        chosen = cand[n - 1].second;
        for (std::size_t i = 0; i < n; ++i) {
            acc += cand[i].first;
            if (target < acc) {
                chosen = cand[i].second;
                break;
            }
        }
    }
    push(chosen);
    clock_.sleep_ms(cost_.decode_ms_per_token);
    return chosen;
}

Mark MockSession::checkpoint() {
    Mark m{next_mark_++, tokens_.size()};
    marks_.push_back(m);
    return m;
}

std::size_t MockSession::find_mark(const Mark& mark) const {
    for (std::size_t i = marks_.size(); i-- > 0;) {
        if (marks_[i].id == mark.id) {
            if (marks_[i].position != mark.position || mark.position > tokens_.size()) {
                break;
            }
            return i;
        }
    }
    throw ContractError("stale or foreign mark " + std::to_string(mark.id));
}

void MockSession::rollback(const Mark& mark) {
    const std::size_t i = find_mark(mark);
    tokens_.resize(mark.position);
    states_.resize(mark.position + 1);
    marks_.resize(i);
}

void MockSession::release(const Mark& mark) {
    marks_.resize(find_mark(mark));
}

void MockSession::reset() {
    tokens_.clear();
    states_.assign(1, GrammarState{});
    marks_.clear();
}

} // namespace duet
