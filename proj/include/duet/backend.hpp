#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "duet/tokenizer.hpp"

namespace duet {

class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller broke the session contract (stale mark, decode on empty cache, ...).
class ContractError : public BackendError {
public:
    using BackendError::BackendError;
};

class VocabMismatch : public ContractError {
public:
    using ContractError::ContractError;
};

class BackendTimeout : public BackendError {
public:
    using BackendError::BackendError;
};

class ConnectionLost : public BackendError {
public:
    using BackendError::BackendError;
};

class ProtocolError : public BackendError {
public:
    using BackendError::BackendError;
};

// An operation failed midway; the session state is unknown and every later
// call fails with this error.
class PoisonedSession : public BackendError {
public:
    using BackendError::BackendError;
};

struct SamplingParams {
    double temperature = 1.0; // <= 1e-6 means greedy
    double top_p = 0.95;
    std::uint64_t seed = 7;
    int max_new_tokens = 256;

    void validate() const;
};

enum class DecodeConstraint : std::uint8_t { Any = 0, Duration = 1 };

struct Mark {
    std::uint64_t id = 0;
    std::size_t position = 0;
};

// Ids plus the vocabulary they were produced with.
struct TokenBatch {
    std::string_view vocab;
    std::span<const TokenId> ids;
};

// Exclusive handle over one generative cache. Checkpoints form a stack:
// rollback(m) restores cache_len to m.position and discards m and every mark
// above it; release(m) discards them without touching the cache.
class BackendSession {
public:
    virtual ~BackendSession() = default;

    virtual const std::string& vocab_descriptor() const = 0;
    virtual std::size_t cache_len() const = 0;

    virtual std::size_t prefill(const TokenBatch& batch) = 0;
    virtual TokenId decode_next(const SamplingParams& params, DecodeConstraint constraint = DecodeConstraint::Any) = 0;
    virtual Mark checkpoint() = 0;
    virtual void rollback(const Mark& mark) = 0;
    virtual void release(const Mark& mark) = 0;
    virtual void reset() = 0;
};

class Backend {
public:
    virtual ~Backend() = default;
    // Throws VocabMismatch when the backend cannot serve this vocabulary.
    virtual std::unique_ptr<BackendSession> open_session(const std::string& vocab_descriptor) = 0;
};

} // namespace duet
