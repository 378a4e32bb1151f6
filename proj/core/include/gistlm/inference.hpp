// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gistlm/config.hpp"
#include "gistlm/layout.hpp"
#include "gistlm/model.hpp"

namespace gistlm {

/// Retained attention entries for one session. Entry metadata is shared
/// across layers; key/value rows are stored per layer, post-rotary. Sink and
/// gist entries are never evicted; raw entries only survive while their unit
/// stays inside the local window.
template <typename Real>
class KVCache {
public:
    struct EntryMeta {
        TokenKind kind;
        int64_t aug_index;
        int64_t unit_id;
        int64_t position_id;
    };

    KVCache() = default;
    KVCache(int64_t layers, int64_t embed_dim) : embed_dim_(embed_dim), keys_(layers), values_(layers) {}

    int64_t layer_count() const { return static_cast<int64_t>(keys_.size()); }
    int64_t entry_count() const { return static_cast<int64_t>(meta_.size()); }
    int64_t sink_entries() const { return sinks_; }
    int64_t gist_entries() const { return gists_; }
    int64_t raw_entries() const { return entry_count() - sinks_ - gists_; }

    const std::vector<EntryMeta>& meta() const { return meta_; }
    std::span<const Real> keys(int64_t layer) const { return keys_[layer]; }
    std::span<const Real> values(int64_t layer) const { return values_[layer]; }

    /// Registers metadata for a new entry; key/value rows follow per layer.
    void push_meta(const EntryMeta& m);
    void push_kv(int64_t layer, std::span<const Real> key_row, std::span<const Real> value_row);

    /// Removes exactly the raw entries with unit_id < unit_lo; sinks and
    /// gists are untouched and survivor order is preserved. Returns the
    /// number of entries removed.
    int64_t evict_raw_before(int64_t unit_lo);

private:
    int64_t embed_dim_ = 0;
    int64_t sinks_ = 0;
    int64_t gists_ = 0;
    std::vector<EntryMeta> meta_;
    std::vector<std::vector<Real>> keys_, values_;  // [layer][entry * embed_dim]
};

/// Removes the raw entries of units older than current_unit - window_units.
template <typename Real>
void evict(KVCache<Real>& cache, int64_t current_unit, const CompressionConfig& config);

struct DecodeState {
    int64_t raw_count = 0;        // raw tokens consumed or emitted so far
    int64_t current_unit = -1;    // unit of the most recently appended slot
    int64_t pending_in_unit = 0;  // raw_count % ratio
    int64_t next_position_id = 1;
};

/// Single-owner decode session over shared immutable model parameters.
/// Prefill encodes the sink prefix once and then the prompt chunk-by-chunk,
/// dropping out-of-window raw entries after every unit transition; decode
/// appends one raw token at a time and inserts the gist slot whenever a unit
/// completes (its logits are never consumed; only its KV survives).
template <typename Real>
class InferenceEngine {
public:
    explicit InferenceEngine(const Model<Real>& model);

    /// Processes the prompt in chunks of chunk_size raw tokens (the last
    /// chunk may be shorter but must stay a multiple of the ratio). Returns
    /// the next-token logits taken at the last raw slot, matching the
    /// one-pass forward at that position.
    std::vector<Real> prefill(std::span<const TokenId> raw_tokens, int64_t chunk_size);

    /// Appends one raw token and returns next-token logits.
    std::vector<Real> decode_step(TokenId token);

    const KVCache<Real>& cache() const { return cache_; }
    const DecodeState& state() const { return state_; }
    const Model<Real>& model() const { return model_; }

    /// Closed-form per-layer entry count the cache must hold right now;
    /// the engine checks this after every step.
    int64_t expected_entry_count() const;

private:
    void append_and_forward(const std::vector<TokenSlot>& slots, std::vector<Real>* last_logits);
    void check_memory_law() const;

    const Model<Real>& model_;
    KVCache<Real> cache_;
    DecodeState state_;
    bool prefilled_ = false;
};

/// Greedy pick over the base vocabulary only; reserved sink/gist ids are
/// never emitted.
template <typename Real>
TokenId greedy_base_token(std::span<const Real> logits_row, int64_t vocab);

}  // namespace gistlm
