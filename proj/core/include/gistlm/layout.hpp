// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gistlm/config.hpp"

namespace gistlm {

using TokenId = int32_t;

enum class TokenKind : uint8_t { Sink, Raw, Gist };

/// One slot of the gist-augmented sequence. Raw slots carry vocabulary ids;
/// sink slot i carries reserved id vocab_size + i and every gist slot carries
/// the single shared reserved id vocab_size + sink_count.
struct TokenSlot {
    TokenKind kind = TokenKind::Raw;
    int64_t aug_index = 0;    // position in augmented order
    int64_t raw_index = -1;   // index into the raw stream, -1 for sink/gist
    int64_t unit_id = -1;     // gist-unit ordinal, -1 for sinks
    int64_t position_id = 1;  // rotary position index, 1-based
    TokenId token_id = 0;
};

/// The augmented sequence [s_1..s_s, x_1..x_r, g_1, ..., x_T, g_{T/r}] with
/// all slot metadata populated. Length is sink_count + T + T/ratio.
struct AugmentedSequence {
    std::vector<TokenSlot> slots;
    CompressionConfig config;
    int64_t raw_len = 0;

    int64_t size() const { return static_cast<int64_t>(slots.size()); }
};

/// Reserved id for sink slot i (ids appended after the base vocabulary).
TokenId sink_token_id(TokenId vocab_size, int64_t sink_index);
/// Reserved id shared by every gist slot.
TokenId gist_token_id(TokenId vocab_size, const CompressionConfig& config);

/// s + T + T/r for a complete sequence.
int64_t augmented_length(int64_t raw_len, const CompressionConfig& config);

/// Appends the minimal number of pad_id tokens so the length becomes
/// divisible by the compression ratio.
std::vector<TokenId> pad_to_ratio(std::vector<TokenId> raw_tokens, TokenId pad_id,
                                  const CompressionConfig& config);

/// Builds the gist-augmented sequence. The raw length must be a positive
/// multiple of the ratio; callers with ragged input use pad_to_ratio first.
AugmentedSequence augment(std::span<const TokenId> raw_tokens, const CompressionConfig& config,
                          TokenId vocab_size);

/// Like augment(), but accepts any positive raw length: gists are inserted
/// only after complete units, so a trailing partial unit carries no gist.
/// This is the layout a decode session occupies mid-unit.
AugmentedSequence augment_partial(std::span<const TokenId> raw_tokens,
                                  const CompressionConfig& config, TokenId vocab_size);

/// Recomputes every slot's position id in place: sink i gets i+1, raw j gets
/// s+j+1, and each gist gets the position of the raw token right after it
/// (the final gist gets s+T+1, the hypothetical next raw position).
void assign_position_ids(AugmentedSequence& seq);

/// Closed-form slot classification from the index alone; agrees with the
/// slots materialized by augment().
TokenKind kind_of(int64_t aug_index, const CompressionConfig& config, int64_t raw_len);
/// Closed-form gist-unit ordinal (-1 for sinks). Throws for negative indexes.
int64_t unit_of(int64_t aug_index, const CompressionConfig& config);

/// Closed-form inverses used throughout the kernel layout code.
int64_t raw_index_of(int64_t aug_index, const CompressionConfig& config);  // -1 for sink/gist
int64_t aug_index_of_raw(int64_t raw_index, const CompressionConfig& config);
int64_t aug_index_of_gist(int64_t unit, const CompressionConfig& config);
int64_t position_id_of(int64_t aug_index, const CompressionConfig& config);

}  // namespace gistlm
