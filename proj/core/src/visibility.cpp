// SPDX-License-Identifier: Apache-2.0

#include "gistlm/visibility.hpp"

#include <numeric>
#include <ostream>
#include <string>

#include "gistlm/errors.hpp"

namespace gistlm {

uint64_t DenseMask::count() const {
    return std::accumulate(bits_.begin(), bits_.end(), uint64_t{0});
}

void ChunkBaselineSpec::validate() const {
    if (ratio < 2) {
        throw ConfigError("chunk baseline ratio must be >= 2");
    }
    if (ratio >= chunk_len) {
        throw ConfigError("chunk baseline requires ratio < chunk_len");
    }
    if (chunk_len % ratio != 0) {
        throw ConfigError("chunk_len must be divisible by ratio");
    }
}

std::vector<int64_t> visible_set(const AugmentedSequence& seq, int64_t t) {
    if (t < 0 || t >= seq.size()) {
        throw IndexOutOfRange("query index " + std::to_string(t) + " not in [0, " +
                              std::to_string(seq.size()) + ")");
    }
    const int64_t k = seq.config.window_units;
    const int64_t query_unit = seq.slots[t].unit_id;

    std::vector<int64_t> visible;
    for (int64_t j = 0; j <= t; ++j) {
        const TokenSlot& key = seq.slots[j];
        const bool always = key.kind == TokenKind::Sink || key.kind == TokenKind::Gist;
        const bool in_window =
            key.unit_id >= 0 && query_unit >= 0 && key.unit_id >= query_unit - k;
        if (always || in_window) {
            visible.push_back(j);
        }
    }
    return visible;
}

bool unified_visible(int64_t t, int64_t j, const CompressionConfig& config) {
    if (j > t || j < 0) {
        return false;
    }
    const int64_t s = config.sink_count;
    if (j < s) {
        return true;  // sink key
    }
    const int64_t key_offset = j - s;
    if (key_offset % (config.ratio + 1) == config.ratio) {
        return true;  // gist key
    }
    const int64_t key_unit = key_offset / (config.ratio + 1);
    const int64_t query_unit = t < s ? -1 : (t - s) / (config.ratio + 1);
    return key_unit >= query_unit - config.window_units;
}

DenseMask build_unified_mask(const AugmentedSequence& seq) {
    const int64_t n = seq.size();
    DenseMask mask(n, n);
    for (int64_t t = 0; t < n; ++t) {
        for (int64_t j : visible_set(seq, t)) {
            mask.set(t, j, true);
        }
    }
    return mask;
}

AugmentedSequence chunk_baseline_sequence(std::span<const TokenId> raw_tokens,
                                          const ChunkBaselineSpec& spec, TokenId vocab_size) {
    spec.validate();
    const int64_t t = static_cast<int64_t>(raw_tokens.size());
    if (t == 0 || t % spec.chunk_len != 0) {
        throw NonDivisibleLength("raw length " + std::to_string(t) +
                                 " is not a positive multiple of chunk_len " +
                                 std::to_string(spec.chunk_len));
    }
    CompressionConfig cfg;
    cfg.ratio = spec.ratio;
    cfg.sink_count = 0;
    AugmentedSequence seq = augment(raw_tokens, cfg, vocab_size);
    // The baseline predates position realignment: ids stay sequential.
    for (TokenSlot& slot : seq.slots) {
        slot.position_id = slot.aug_index + 1;
    }
    return seq;
}

DenseMask build_chunk_mask(int64_t raw_len, const ChunkBaselineSpec& spec) {
    spec.validate();
    if (raw_len <= 0 || raw_len % spec.chunk_len != 0) {
        throw NonDivisibleLength("raw length " + std::to_string(raw_len) +
                                 " is not a positive multiple of chunk_len " +
                                 std::to_string(spec.chunk_len));
    }
    CompressionConfig cfg;
    cfg.ratio = spec.ratio;
    cfg.sink_count = 0;

    const int64_t total = augmented_length(raw_len, cfg);
    const int64_t chunk_slots = spec.chunk_len + spec.gists_per_chunk();

    DenseMask mask(total, total);
    for (int64_t t = 0; t < total; ++t) {
        const int64_t query_chunk = t / chunk_slots;
        for (int64_t j = 0; j <= t; ++j) {
            if (j / chunk_slots == query_chunk) {
                mask.set(t, j, true);  // full causal visibility inside the chunk
            } else if ((j % (cfg.ratio + 1)) == cfg.ratio) {
                mask.set(t, j, true);  // accumulated gists of preceding chunks
            }
        }
    }
    return mask;
}

void write_pbm(const DenseMask& mask, std::ostream& out) {
    out << "P1\n" << mask.cols() << ' ' << mask.rows() << '\n';
    for (int64_t t = 0; t < mask.rows(); ++t) {
        for (int64_t j = 0; j < mask.cols(); ++j) {
            out << (mask.at(t, j) ? '1' : '0');
            out << (j + 1 == mask.cols() ? '\n' : ' ');
        }
    }
}

}  // namespace gistlm
