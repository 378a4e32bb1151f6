// SPDX-License-Identifier: Apache-2.0

#include "gistlm/layout.hpp"

#include <string>

#include "gistlm/errors.hpp"

namespace gistlm {

TokenId sink_token_id(TokenId vocab_size, int64_t sink_index) {
    return vocab_size + static_cast<TokenId>(sink_index);
}

TokenId gist_token_id(TokenId vocab_size, const CompressionConfig& config) {
    return vocab_size + static_cast<TokenId>(config.sink_count);
}

int64_t augmented_length(int64_t raw_len, const CompressionConfig& config) {
    if (raw_len % config.ratio != 0) {
        throw NonDivisibleLength("raw length " + std::to_string(raw_len) +
                                 " is not divisible by ratio " + std::to_string(config.ratio));
    }
    return config.sink_count + raw_len + raw_len / config.ratio;
}

std::vector<TokenId> pad_to_ratio(std::vector<TokenId> raw_tokens, TokenId pad_id,
                                  const CompressionConfig& config) {
    const int64_t rem = static_cast<int64_t>(raw_tokens.size()) % config.ratio;
    if (rem != 0) {
        raw_tokens.insert(raw_tokens.end(), static_cast<size_t>(config.ratio - rem), pad_id);
    }
    return raw_tokens;
}

namespace {

AugmentedSequence build_sequence(std::span<const TokenId> raw_tokens,
                                 const CompressionConfig& config, TokenId vocab_size) {
    const int64_t t = static_cast<int64_t>(raw_tokens.size());
    const int64_t s = config.sink_count;
    const int64_t r = config.ratio;
    const int64_t complete_units = t / r;

    AugmentedSequence seq;
    seq.config = config;
    seq.raw_len = t;
    seq.slots.reserve(static_cast<size_t>(s + t + complete_units));

    for (int64_t i = 0; i < s; ++i) {
        seq.slots.push_back(TokenSlot{TokenKind::Sink, i, -1, -1, 1, sink_token_id(vocab_size, i)});
    }
    const TokenId gist_id = gist_token_id(vocab_size, config);
    int64_t aug = s;
    for (int64_t j = 0; j < t; ++j) {
        const int64_t unit = j / r;
        seq.slots.push_back(TokenSlot{TokenKind::Raw, aug++, j, unit, 1, raw_tokens[j]});
        if (j % r == r - 1) {
            seq.slots.push_back(TokenSlot{TokenKind::Gist, aug++, -1, unit, 1, gist_id});
        }
    }
    assign_position_ids(seq);
    return seq;
}

}  // namespace

AugmentedSequence augment(std::span<const TokenId> raw_tokens, const CompressionConfig& config,
                          TokenId vocab_size) {
    config.validate();
    const int64_t t = static_cast<int64_t>(raw_tokens.size());
    if (t == 0) {
        throw NonDivisibleLength("cannot augment an empty raw sequence");
    }
    if (t % config.ratio != 0) {
        throw NonDivisibleLength("raw length " + std::to_string(t) +
                                 " is not divisible by ratio " + std::to_string(config.ratio));
    }
    return build_sequence(raw_tokens, config, vocab_size);
}

AugmentedSequence augment_partial(std::span<const TokenId> raw_tokens,
                                  const CompressionConfig& config, TokenId vocab_size) {
    config.validate();
    if (raw_tokens.empty()) {
        throw NonDivisibleLength("cannot augment an empty raw sequence");
    }
    return build_sequence(raw_tokens, config, vocab_size);
}

void assign_position_ids(AugmentedSequence& seq) {
    const int64_t s = seq.config.sink_count;
    const int64_t r = seq.config.ratio;
    for (TokenSlot& slot : seq.slots) {
        switch (slot.kind) {
            case TokenKind::Sink:
                slot.position_id = slot.aug_index + 1;
                break;
            case TokenKind::Raw:
                slot.position_id = s + slot.raw_index + 1;
                break;
            case TokenKind::Gist:
                // Same position id as the raw token right after it; the final
                // gist takes the hypothetical next raw position s + T + 1.
                slot.position_id = s + (slot.unit_id + 1) * r + 1;
                break;
        }
    }
}

TokenKind kind_of(int64_t aug_index, const CompressionConfig& config, int64_t raw_len) {
    const int64_t total = augmented_length(raw_len, config);
    if (aug_index < 0 || aug_index >= total) {
        throw IndexOutOfRange("aug_index " + std::to_string(aug_index) + " not in [0, " +
                              std::to_string(total) + ")");
    }
    if (aug_index < config.sink_count) {
        return TokenKind::Sink;
    }
    const int64_t offset = aug_index - config.sink_count;
    return offset % (config.ratio + 1) == config.ratio ? TokenKind::Gist : TokenKind::Raw;
}

int64_t unit_of(int64_t aug_index, const CompressionConfig& config) {
    if (aug_index < 0) {
        throw IndexOutOfRange("aug_index " + std::to_string(aug_index) + " is negative");
    }
    if (aug_index < config.sink_count) {
        return -1;
    }
    return (aug_index - config.sink_count) / (config.ratio + 1);
}

int64_t raw_index_of(int64_t aug_index, const CompressionConfig& config) {
    if (aug_index < config.sink_count) {
        return -1;
    }
    const int64_t offset = aug_index - config.sink_count;
    const int64_t unit = offset / (config.ratio + 1);
    const int64_t within = offset % (config.ratio + 1);
    return within == config.ratio ? -1 : unit * config.ratio + within;
}

int64_t aug_index_of_raw(int64_t raw_index, const CompressionConfig& config) {
    return config.sink_count + (raw_index / config.ratio) * (config.ratio + 1) +
           raw_index % config.ratio;
}

int64_t aug_index_of_gist(int64_t unit, const CompressionConfig& config) {
    return config.sink_count + unit * (config.ratio + 1) + config.ratio;
}

int64_t position_id_of(int64_t aug_index, const CompressionConfig& config) {
    if (aug_index < config.sink_count) {
        return aug_index + 1;
    }
    const int64_t raw = raw_index_of(aug_index, config);
    if (raw >= 0) {
        return config.sink_count + raw + 1;
    }
    return config.sink_count + (unit_of(aug_index, config) + 1) * config.ratio + 1;
}

}  // namespace gistlm
