// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "gistlm/layout.hpp"

namespace gistlm {

/// Query-by-key boolean visibility matrix. Entry (t, j) is true iff key j is
/// visible to query t. Support is strictly causal and every row includes its
/// own diagonal.
class DenseMask {
public:
    DenseMask() = default;
    DenseMask(int64_t rows, int64_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }

    bool at(int64_t t, int64_t j) const { return bits_[t * cols_ + j] != 0; }
    void set(int64_t t, int64_t j, bool v) { bits_[t * cols_ + j] = v ? 1 : 0; }

    const uint8_t* row(int64_t t) const { return bits_.data() + t * cols_; }

    /// Number of true entries.
    uint64_t count() const;

    bool operator==(const DenseMask&) const = default;

private:
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<uint8_t> bits_;
};

/// The chunk-wise baseline: fixed-length chunks of chunk_len raw tokens with
/// gists interleaved every ratio raw tokens, no sinks, no position
/// realignment. Queries see all prior chunks' gists plus their own chunk
/// causally.
struct ChunkBaselineSpec {
    int64_t chunk_len = 64;
    int64_t ratio = 4;

    int64_t gists_per_chunk() const { return chunk_len / ratio; }
    void validate() const;
};

/// The set of keys visible to query t under the unified sparse rule:
/// (sinks ∪ gists ∪ local window) ∩ {j <= t}, where the window covers every
/// slot whose unit lies within window_units before the query's unit.
/// Returned sorted ascending.
std::vector<int64_t> visible_set(const AugmentedSequence& seq, int64_t t);

/// Closed-form version of the rule above: no slot tables, pure index
/// arithmetic. raw_len may describe a partial final unit.
bool unified_visible(int64_t t, int64_t j, const CompressionConfig& config);

DenseMask build_unified_mask(const AugmentedSequence& seq);

/// The baseline augmented order for a chunked sequence: identical interleave
/// to augment() with no sinks, but position ids stay sequential (1..T').
AugmentedSequence chunk_baseline_sequence(std::span<const TokenId> raw_tokens,
                                          const ChunkBaselineSpec& spec, TokenId vocab_size);

DenseMask build_chunk_mask(int64_t raw_len, const ChunkBaselineSpec& spec);

/// Serializes a mask as an ASCII PBM (P1); rows are queries top-to-bottom,
/// visible entries are black pixels.
void write_pbm(const DenseMask& mask, std::ostream& out);

}  // namespace gistlm
