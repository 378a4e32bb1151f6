// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gistlm/config.hpp"
#include "gistlm/gist_shift.hpp"
#include "gistlm/visibility.hpp"

namespace gistlm {

/// Attention result: outputs plus the per-(row, head) log-sum-exp of masked
/// scores the backward pass recomputes probabilities from. Rows with an empty
/// visible set (only pad rows in practice) carry zero output and -inf lse.
template <typename Real>
struct AttentionOutput {
    std::vector<Real> out;  // [len, heads, head_dim]
    std::vector<Real> lse;  // [len, heads]
};

template <typename Real>
struct AttentionGrads {
    std::vector<Real> dq, dk, dv;  // each [len, heads, head_dim]
};

/// Reference path: per-row numerically stabilized softmax attention over an
/// explicit dense mask, in original sequence order.
template <typename Real>
AttentionOutput<Real> dense_masked_attention(std::span<const Real> q, std::span<const Real> k,
                                             std::span<const Real> v, int64_t heads,
                                             int64_t head_dim, const DenseMask& mask);

template <typename Real>
AttentionGrads<Real> dense_masked_attention_backward(std::span<const Real> q,
                                                     std::span<const Real> k,
                                                     std::span<const Real> v,
                                                     const AttentionOutput<Real>& fwd,
                                                     std::span<const Real> dout, int64_t heads,
                                                     int64_t head_dim, const DenseMask& mask);

/// Block-sparse path over gist-shifted tensors: visits only the layout's
/// visible blocks, streaming softmax state across them. Semantics match
/// dense_masked_attention through the shift permutation.
template <typename Real>
AttentionOutput<Real> sparse_forward(std::span<const Real> q, std::span<const Real> k,
                                     std::span<const Real> v, int64_t heads, int64_t head_dim,
                                     const BlockLayout& layout);

/// Exact gradients of sum(out * dout) under the block-sparse visibility.
/// Recomputes per-block probabilities from the saved lse; visits the same
/// block set as the forward pass. Gradients of never-visited keys are
/// exactly zero.
template <typename Real>
AttentionGrads<Real> sparse_backward(std::span<const Real> q, std::span<const Real> k,
                                     std::span<const Real> v, const AttentionOutput<Real>& fwd,
                                     std::span<const Real> dout, int64_t heads, int64_t head_dim,
                                     const BlockLayout& layout);

/// Exact visible-entry counts: the unified pattern's true-bit total versus
/// the raw-length causal baseline. dense/sparse is the hardware-independent
/// speed-up estimate.
struct EntryCounts {
    uint64_t sparse_entries = 0;
    uint64_t dense_causal_entries = 0;

    double ratio() const {
        return static_cast<double>(dense_causal_entries) / static_cast<double>(sparse_entries);
    }
};

EntryCounts attended_entry_count(int64_t raw_len, const CompressionConfig& config);

}  // namespace gistlm
