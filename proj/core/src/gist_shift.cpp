// SPDX-License-Identifier: Apache-2.0

#include "gistlm/gist_shift.hpp"

#include <algorithm>
#include <string>

#include "gistlm/errors.hpp"
#include "gistlm/visibility.hpp"

namespace gistlm {

namespace {

int64_t round_up(int64_t n, int64_t multiple) {
    return (n + multiple - 1) / multiple * multiple;
}

}  // namespace

ShiftPermutation gist_shift(std::span<const TokenSlot> slots, int64_t block_size) {
    if (block_size < 1) {
        throw ConfigError("block_size must be positive");
    }
    const int64_t n = static_cast<int64_t>(slots.size());
    ShiftPermutation shift;
    shift.block_size = block_size;
    shift.orig_len = n;
    shift.padded_len = round_up(n, block_size);
    shift.perm.assign(shift.padded_len, -1);
    shift.inv.assign(n, -1);

    int64_t next = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (slots[i].kind != TokenKind::Gist) {
            shift.perm[next] = i;
            shift.inv[i] = next++;
        }
    }
    for (int64_t i = 0; i < n; ++i) {
        if (slots[i].kind == TokenKind::Gist) {
            shift.perm[next] = i;
            shift.inv[i] = next++;
        }
    }
    return shift;
}

ShiftPermutation gist_shift(const AugmentedSequence& seq, int64_t block_size) {
    return gist_shift(std::span<const TokenSlot>(seq.slots), block_size);
}

BlockLayout BlockLayout::unified(int64_t raw_len, const CompressionConfig& config) {
    config.validate();
    BlockLayout layout;
    layout.pattern_ = Pattern::Unified;
    layout.config_ = config;
    layout.raw_len_ = raw_len;
    layout.block_size_ = config.block_size;
    layout.orig_len_ = augmented_length(raw_len, config);  // throws if not divisible
    layout.padded_len_ = round_up(layout.orig_len_, config.block_size);
    layout.gist_region_begin_ = config.sink_count + raw_len;

    layout.index_array_.resize(layout.padded_len_);
    const int64_t s = config.sink_count;
    const int64_t r = config.ratio;
    for (int64_t p = 0; p < layout.padded_len_; ++p) {
        if (p >= layout.orig_len_) {
            layout.index_array_[p] = -1;
        } else if (p < s) {
            layout.index_array_[p] = p;
        } else if (p < layout.gist_region_begin_) {
            const int64_t j = p - s;
            layout.index_array_[p] = s + (j / r) * (r + 1) + j % r;
        } else {
            layout.index_array_[p] = s + (p - layout.gist_region_begin_) * (r + 1) + r;
        }
    }
    return layout;
}

BlockLayout BlockLayout::causal(int64_t len, int64_t block_size) {
    if (len <= 0) {
        throw ConfigError("causal layout requires a positive length");
    }
    if (block_size < 1) {
        throw ConfigError("block_size must be positive");
    }
    BlockLayout layout;
    layout.pattern_ = Pattern::Causal;
    layout.raw_len_ = len;
    layout.block_size_ = block_size;
    layout.orig_len_ = len;
    layout.padded_len_ = round_up(len, block_size);
    layout.gist_region_begin_ = len;
    layout.index_array_.resize(layout.padded_len_);
    for (int64_t p = 0; p < layout.padded_len_; ++p) {
        layout.index_array_[p] = p < len ? p : -1;
    }
    return layout;
}

void BlockLayout::check_query_block(int64_t q) const {
    if (q < 0 || q >= num_query_blocks()) {
        throw IndexOutOfRange("query block " + std::to_string(q) + " not in [0, " +
                              std::to_string(num_query_blocks()) + ")");
    }
}

std::vector<BlockLayout::Segment> BlockLayout::segments(int64_t block) const {
    const int64_t lo = block * block_size_;
    const int64_t hi = std::min(lo + block_size_, orig_len_);
    std::vector<Segment> out;
    if (lo >= hi) {
        return out;
    }
    if (pattern_ == Pattern::Causal) {
        out.push_back(Segment{TokenKind::Raw, lo, hi});
        return out;
    }
    const auto add = [&](TokenKind kind, int64_t a, int64_t b) {
        a = std::max(a, lo);
        b = std::min(b, hi);
        if (a < b) {
            out.push_back(Segment{kind, a, b});
        }
    };
    add(TokenKind::Sink, 0, config_.sink_count);
    add(TokenKind::Raw, config_.sink_count, gist_region_begin_);
    add(TokenKind::Gist, gist_region_begin_, orig_len_);
    return out;
}

bool BlockLayout::segment_any(const Segment& rows, const Segment& cols) const {
    const int64_t rt_lo = rows.lo, rt_hi = rows.hi - 1;  // inclusive shifted ranges
    const int64_t cj_lo = cols.lo, cj_hi = cols.hi - 1;
    if (pattern_ == Pattern::Causal) {
        return cj_lo <= rt_hi;
    }
    const int64_t s = config_.sink_count;
    const int64_t k = config_.window_units;
    const auto raw_unit = [&](int64_t p) { return (p - s) / config_.ratio; };
    const auto gist_unit = [&](int64_t p) { return p - gist_region_begin_; };

    switch (rows.kind) {
        case TokenKind::Sink:
            return cols.kind == TokenKind::Sink && cj_lo <= rt_hi;
        case TokenKind::Raw:
            switch (cols.kind) {
                case TokenKind::Sink:
                    return true;
                case TokenKind::Raw:
                    if (cj_lo <= rt_hi && rt_lo <= cj_hi) {
                        return true;  // ranges overlap: the diagonal pair qualifies
                    }
                    if (cj_hi < rt_lo) {
                        return raw_unit(cj_hi) >= raw_unit(rt_lo) - k;
                    }
                    return false;  // keys strictly in the future
                case TokenKind::Gist:
                    return gist_unit(cj_lo) < raw_unit(rt_hi);
            }
            break;
        case TokenKind::Gist: {
            const int64_t u_lo = gist_unit(rt_lo), u_hi = gist_unit(rt_hi);
            switch (cols.kind) {
                case TokenKind::Sink:
                    return true;
                case TokenKind::Raw:
                    return raw_unit(cj_hi) >= u_lo - k && raw_unit(cj_lo) <= u_hi;
                case TokenKind::Gist:
                    return gist_unit(cj_lo) <= u_hi;
            }
            break;
        }
    }
    return false;
}

bool BlockLayout::segment_all(const Segment& rows, const Segment& cols) const {
    const int64_t rt_lo = rows.lo, rt_hi = rows.hi - 1;
    const int64_t cj_lo = cols.lo, cj_hi = cols.hi - 1;
    if (pattern_ == Pattern::Causal) {
        return cj_hi <= rt_lo;
    }
    const int64_t s = config_.sink_count;
    const int64_t k = config_.window_units;
    const auto raw_unit = [&](int64_t p) { return (p - s) / config_.ratio; };
    const auto gist_unit = [&](int64_t p) { return p - gist_region_begin_; };

    switch (rows.kind) {
        case TokenKind::Sink:
            return cols.kind == TokenKind::Sink && cj_hi <= rt_lo;
        case TokenKind::Raw:
            switch (cols.kind) {
                case TokenKind::Sink:
                    return true;
                case TokenKind::Raw:
                    return cj_hi <= rt_lo && raw_unit(cj_lo) >= raw_unit(rt_hi) - k;
                case TokenKind::Gist:
                    return gist_unit(cj_hi) < raw_unit(rt_lo);
            }
            break;
        case TokenKind::Gist: {
            const int64_t u_lo = gist_unit(rt_lo), u_hi = gist_unit(rt_hi);
            switch (cols.kind) {
                case TokenKind::Sink:
                    return true;
                case TokenKind::Raw:
                    return raw_unit(cj_lo) >= u_hi - k && raw_unit(cj_hi) <= u_lo;
                case TokenKind::Gist:
                    return gist_unit(cj_hi) <= u_lo;
            }
            break;
        }
    }
    return false;
}

std::vector<VisibleBlock> BlockLayout::visible_blocks(int64_t q) const {
    check_query_block(q);
    const std::vector<Segment> rows = segments(q);
    std::vector<VisibleBlock> out;
    if (rows.empty()) {
        return out;  // query block entirely inside the padding
    }
    const bool pad_rows = (q + 1) * block_size_ > orig_len_;
    const int64_t blocks = num_query_blocks();
    for (int64_t c = 0; c < blocks; ++c) {
        const std::vector<Segment> cols = segments(c);
        if (cols.empty()) {
            break;
        }
        bool any = false;
        bool all = !pad_rows && (c + 1) * block_size_ <= orig_len_;
        for (const Segment& rs : rows) {
            for (const Segment& cs : cols) {
                if (segment_any(rs, cs)) {
                    any = true;
                }
                if (all && !segment_all(rs, cs)) {
                    all = false;
                }
            }
        }
        if (any) {
            out.push_back(VisibleBlock{c, all ? BlockTag::Full : BlockTag::Partial});
        }
    }
    return out;
}

bool BlockLayout::shifted_visible(int64_t t_shifted, int64_t j_shifted) const {
    if (t_shifted < 0 || t_shifted >= padded_len_ || j_shifted < 0 || j_shifted >= padded_len_) {
        return false;
    }
    const int64_t orig_t = index_array_[t_shifted];
    const int64_t orig_j = index_array_[j_shifted];
    if (orig_t < 0 || orig_j < 0) {
        return false;
    }
    if (pattern_ == Pattern::Causal) {
        return orig_j <= orig_t;
    }
    return unified_visible(orig_t, orig_j, config_);
}

void BlockLayout::inblock_mask(int64_t q, int64_t kv, uint8_t* tile) const {
    check_query_block(q);
    if (kv < 0 || kv >= num_query_blocks()) {
        throw IndexOutOfRange("key block " + std::to_string(kv) + " not in [0, " +
                              std::to_string(num_query_blocks()) + ")");
    }
    const int64_t b = block_size_;
    for (int64_t a = 0; a < b; ++a) {
        for (int64_t c = 0; c < b; ++c) {
            tile[a * b + c] = shifted_visible(q * b + a, kv * b + c) ? 1 : 0;
        }
    }
}

}  // namespace gistlm
