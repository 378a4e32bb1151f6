// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "gistlm/layout.hpp"

namespace gistlm {

/// Stable two-class partition moving every gist slot to the rightmost region,
/// padded to a multiple of the block size. perm maps shifted slot -> original
/// aug_index (-1 for trailing pad slots); inv is its inverse.
struct ShiftPermutation {
    int64_t block_size = 0;
    int64_t orig_len = 0;
    int64_t padded_len = 0;
    std::vector<int64_t> perm;
    std::vector<int64_t> inv;
};

ShiftPermutation gist_shift(const AugmentedSequence& seq, int64_t block_size);
ShiftPermutation gist_shift(std::span<const TokenSlot> slots, int64_t block_size);

enum class BlockTag : uint8_t {
    Full,     // every entry of the tile is visible; no in-block mask needed
    Partial,  // at least one entry differs; the tile mask must be applied
};

struct VisibleBlock {
    int64_t block = 0;
    BlockTag tag = BlockTag::Partial;

    bool operator==(const VisibleBlock&) const = default;
};

/// Block-sparse attention layout over the gist-shifted order. Visible
/// key-block lists and in-block masks are recomputed on demand from closed
/// form (raw_len, ratio, sink_count, window_units, block_size); the only
/// stored per-slot data is the original-index array the kernel receives as
/// auxiliary input.
class BlockLayout {
public:
    /// Layout of the unified gist pattern for a complete sequence of raw_len
    /// raw tokens under the given config.
    static BlockLayout unified(int64_t raw_len, const CompressionConfig& config);

    /// Plain causal layout over `len` slots (no gists); used as the dense
    /// baseline and for degenerate gist-free sequences.
    static BlockLayout causal(int64_t len, int64_t block_size);

    int64_t block_size() const { return block_size_; }
    int64_t orig_len() const { return orig_len_; }
    int64_t padded_len() const { return padded_len_; }
    int64_t num_query_blocks() const { return padded_len_ / block_size_; }

    /// Original aug_index of every shifted slot; -1 for pad slots.
    const std::vector<int64_t>& index_array() const { return index_array_; }

    /// Ordered list of visible key blocks for query block q, each tagged Full
    /// or Partial. Computed in closed form per call; two calls agree exactly.
    std::vector<VisibleBlock> visible_blocks(int64_t q) const;

    /// Fills tile (row-major block_size x block_size) with the visibility
    /// bits between original indices index_array[q*B+a] and
    /// index_array[kv*B+b]; pad slots yield false rows/columns.
    void inblock_mask(int64_t q, int64_t kv, uint8_t* tile) const;

    /// True visibility bit in shifted coordinates.
    bool shifted_visible(int64_t t_shifted, int64_t j_shifted) const;

private:
    enum class Pattern : uint8_t { Unified, Causal };

    struct Segment {  // one kind-homogeneous run of shifted slots inside a block
        TokenKind kind;
        int64_t lo, hi;  // shifted index range [lo, hi), non-empty
    };

    void check_query_block(int64_t q) const;
    std::vector<Segment> segments(int64_t block) const;
    // any/all visibility between two kind-homogeneous shifted ranges
    bool segment_any(const Segment& rows, const Segment& cols) const;
    bool segment_all(const Segment& rows, const Segment& cols) const;

    Pattern pattern_ = Pattern::Unified;
    CompressionConfig config_;
    int64_t raw_len_ = 0;
    int64_t block_size_ = 0;
    int64_t orig_len_ = 0;
    int64_t padded_len_ = 0;
    int64_t gist_region_begin_ = 0;  // shifted index where the gist region starts
    std::vector<int64_t> index_array_;
};

}  // namespace gistlm
