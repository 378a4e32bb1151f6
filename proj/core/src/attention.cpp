// SPDX-License-Identifier: Apache-2.0

#include "gistlm/attention.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "gistlm/errors.hpp"
#include "gistlm/tensor.hpp"

namespace gistlm {

namespace {

template <typename Real>
constexpr Real neg_inf() {
    return -std::numeric_limits<Real>::infinity();
}

void check_shapes(size_t q, size_t k, size_t v, int64_t len, int64_t heads, int64_t head_dim) {
    const size_t expected = static_cast<size_t>(len * heads * head_dim);
    if (q != expected || k != expected || v != expected) {
        throw ShapeMismatch("attention tensors must each have " + std::to_string(expected) +
                            " elements for length " + std::to_string(len));
    }
}

// Gathers one head's rows [row0, row0+count) into a contiguous [count, d]
// scratch tile; rows at or beyond len are zero-filled.
template <typename Real>
void gather_head(std::span<const Real> src, int64_t len, int64_t heads, int64_t head_dim,
                 int64_t head, int64_t row0, int64_t count, Real* dst) {
    for (int64_t a = 0; a < count; ++a) {
        const int64_t row = row0 + a;
        Real* out = dst + a * head_dim;
        if (row >= len) {
            std::fill(out, out + head_dim, Real(0));
            continue;
        }
        const Real* in = src.data() + (row * heads + head) * head_dim;
        std::copy(in, in + head_dim, out);
    }
}

template <typename Real>
void scatter_add_head(std::span<Real> dst, int64_t len, int64_t heads, int64_t head_dim,
                      int64_t head, int64_t row0, int64_t count, const Real* src) {
    for (int64_t a = 0; a < count; ++a) {
        const int64_t row = row0 + a;
        if (row >= len) {
            continue;
        }
        Real* out = dst.data() + (row * heads + head) * head_dim;
        const Real* in = src + a * head_dim;
        for (int64_t d = 0; d < head_dim; ++d) {
            out[d] += in[d];
        }
    }
}

}  // namespace

template <typename Real>
AttentionOutput<Real> dense_masked_attention(std::span<const Real> q, std::span<const Real> k,
                                             std::span<const Real> v, int64_t heads,
                                             int64_t head_dim, const DenseMask& mask) {
    const int64_t len = mask.rows();
    if (mask.cols() != len) {
        throw ShapeMismatch("dense mask must be square");
    }
    check_shapes(q.size(), k.size(), v.size(), len, heads, head_dim);
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));

    AttentionOutput<Real> result;
    result.out.assign(len * heads * head_dim, Real(0));
    result.lse.assign(len * heads, neg_inf<Real>());

    std::vector<Real> scores(len);
    for (int64_t t = 0; t < len; ++t) {
        const uint8_t* row = mask.row(t);
        for (int64_t h = 0; h < heads; ++h) {
            const Real* qt = q.data() + (t * heads + h) * head_dim;
            Real max_score = neg_inf<Real>();
            for (int64_t j = 0; j <= t; ++j) {
                if (!row[j]) {
                    continue;
                }
                const Real* kj = k.data() + (j * heads + h) * head_dim;
                Real dot = Real(0);
                for (int64_t d = 0; d < head_dim; ++d) {
                    dot += qt[d] * kj[d];
                }
                scores[j] = dot * scale;
                max_score = std::max(max_score, scores[j]);
            }
            if (max_score == neg_inf<Real>()) {
                continue;  // empty visible set
            }
            Real denom = Real(0);
            Real* out = result.out.data() + (t * heads + h) * head_dim;
            for (int64_t j = 0; j <= t; ++j) {
                if (!row[j]) {
                    continue;
                }
                const Real w = std::exp(scores[j] - max_score);
                denom += w;
                const Real* vj = v.data() + (j * heads + h) * head_dim;
                for (int64_t d = 0; d < head_dim; ++d) {
                    out[d] += w * vj[d];
                }
            }
            const Real inv = Real(1) / denom;
            for (int64_t d = 0; d < head_dim; ++d) {
                out[d] *= inv;
            }
            result.lse[t * heads + h] = max_score + std::log(denom);
        }
    }
    return result;
}

template <typename Real>
AttentionGrads<Real> dense_masked_attention_backward(std::span<const Real> q,
                                                     std::span<const Real> k,
                                                     std::span<const Real> v,
                                                     const AttentionOutput<Real>& fwd,
                                                     std::span<const Real> dout, int64_t heads,
                                                     int64_t head_dim, const DenseMask& mask) {
    const int64_t len = mask.rows();
    check_shapes(q.size(), k.size(), v.size(), len, heads, head_dim);
    if (dout.size() != q.size() || fwd.out.size() != q.size() ||
        fwd.lse.size() != static_cast<size_t>(len * heads)) {
        throw ShapeMismatch("backward operands disagree with forward shapes");
    }
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));

    AttentionGrads<Real> grads;
    grads.dq.assign(q.size(), Real(0));
    grads.dk.assign(q.size(), Real(0));
    grads.dv.assign(q.size(), Real(0));

    for (int64_t t = 0; t < len; ++t) {
        const uint8_t* row = mask.row(t);
        for (int64_t h = 0; h < heads; ++h) {
            const Real lse = fwd.lse[t * heads + h];
            if (lse == neg_inf<Real>()) {
                continue;
            }
            const Real* qt = q.data() + (t * heads + h) * head_dim;
            const Real* ot = fwd.out.data() + (t * heads + h) * head_dim;
            const Real* dot_ = dout.data() + (t * heads + h) * head_dim;
            Real delta = Real(0);  // rowsum(out * dout)
            for (int64_t d = 0; d < head_dim; ++d) {
                delta += ot[d] * dot_[d];
            }
            Real* dqt = grads.dq.data() + (t * heads + h) * head_dim;
            for (int64_t j = 0; j <= t; ++j) {
                if (!row[j]) {
                    continue;
                }
                const Real* kj = k.data() + (j * heads + h) * head_dim;
                const Real* vj = v.data() + (j * heads + h) * head_dim;
                Real score = Real(0);
                Real dp = Real(0);
                for (int64_t d = 0; d < head_dim; ++d) {
                    score += qt[d] * kj[d];
                    dp += dot_[d] * vj[d];
                }
                const Real p = std::exp(score * scale - lse);
                const Real ds = p * (dp - delta) * scale;
                Real* dvj = grads.dv.data() + (j * heads + h) * head_dim;
                Real* dkj = grads.dk.data() + (j * heads + h) * head_dim;
                for (int64_t d = 0; d < head_dim; ++d) {
                    dvj[d] += p * dot_[d];
                    dqt[d] += ds * kj[d];
                    dkj[d] += ds * qt[d];
                }
            }
        }
    }
    return grads;
}

template <typename Real>
AttentionOutput<Real> sparse_forward(std::span<const Real> q, std::span<const Real> k,
                                     std::span<const Real> v, int64_t heads, int64_t head_dim,
                                     const BlockLayout& layout) {
    const int64_t len = layout.padded_len();
    check_shapes(q.size(), k.size(), v.size(), len, heads, head_dim);
    const int64_t b = layout.block_size();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));

    AttentionOutput<Real> result;
    result.out.assign(len * heads * head_dim, Real(0));
    result.lse.assign(len * heads, neg_inf<Real>());

    std::vector<Real> qt(b * head_dim), kt(b * head_dim), vt(b * head_dim);
    std::vector<Real> scores(b * b), probs(b * b);
    std::vector<Real> run_max(b), denom(b), acc(b * head_dim);
    std::vector<uint8_t> tile(b * b);

    for (int64_t qb = 0; qb < layout.num_query_blocks(); ++qb) {
        const std::vector<VisibleBlock> visible = layout.visible_blocks(qb);
        if (visible.empty()) {
            continue;
        }
        for (int64_t h = 0; h < heads; ++h) {
            gather_head(q, len, heads, head_dim, h, qb * b, b, qt.data());
            std::fill(run_max.begin(), run_max.end(), neg_inf<Real>());
            std::fill(denom.begin(), denom.end(), Real(0));
            std::fill(acc.begin(), acc.end(), Real(0));

            for (const VisibleBlock& vb : visible) {
                gather_head(k, len, heads, head_dim, h, vb.block * b, b, kt.data());
                gather_head(v, len, heads, head_dim, h, vb.block * b, b, vt.data());
                matmul_nt(qt.data(), kt.data(), scores.data(), b, head_dim, b);
                for (Real& sc : scores) {
                    sc *= scale;
                }
                if (vb.tag == BlockTag::Partial) {
                    layout.inblock_mask(qb, vb.block, tile.data());
                    for (int64_t i = 0; i < b * b; ++i) {
                        if (!tile[i]) {
                            scores[i] = neg_inf<Real>();
                        }
                    }
                }
                for (int64_t a = 0; a < b; ++a) {
                    const Real* srow = scores.data() + a * b;
                    Real row_max = neg_inf<Real>();
                    for (int64_t c = 0; c < b; ++c) {
                        row_max = std::max(row_max, srow[c]);
                    }
                    Real* prow = probs.data() + a * b;
                    if (row_max == neg_inf<Real>()) {
                        std::fill(prow, prow + b, Real(0));
                        continue;
                    }
                    const Real new_max = std::max(run_max[a], row_max);
                    const Real corr =
                        run_max[a] == neg_inf<Real>() ? Real(0) : std::exp(run_max[a] - new_max);
                    Real row_sum = Real(0);
                    for (int64_t c = 0; c < b; ++c) {
                        prow[c] = std::exp(srow[c] - new_max);
                        row_sum += prow[c];
                    }
                    denom[a] = denom[a] * corr + row_sum;
                    Real* arow = acc.data() + a * head_dim;
                    for (int64_t d = 0; d < head_dim; ++d) {
                        arow[d] *= corr;
                    }
                    run_max[a] = new_max;
                }
                matmul(probs.data(), vt.data(), acc.data(), b, b, head_dim, /*accumulate=*/true);
            }

            for (int64_t a = 0; a < b; ++a) {
                const int64_t row = qb * b + a;
                if (row >= len || denom[a] <= Real(0)) {
                    continue;
                }
                Real* out = result.out.data() + (row * heads + h) * head_dim;
                const Real inv = Real(1) / denom[a];
                const Real* arow = acc.data() + a * head_dim;
                for (int64_t d = 0; d < head_dim; ++d) {
                    out[d] = arow[d] * inv;
                }
                result.lse[row * heads + h] = run_max[a] + std::log(denom[a]);
            }
        }
    }
    return result;
}

template <typename Real>
AttentionGrads<Real> sparse_backward(std::span<const Real> q, std::span<const Real> k,
                                     std::span<const Real> v, const AttentionOutput<Real>& fwd,
                                     std::span<const Real> dout, int64_t heads, int64_t head_dim,
                                     const BlockLayout& layout) {
    const int64_t len = layout.padded_len();
    check_shapes(q.size(), k.size(), v.size(), len, heads, head_dim);
    if (dout.size() != q.size() || fwd.out.size() != q.size() ||
        fwd.lse.size() != static_cast<size_t>(len * heads)) {
        throw ShapeMismatch("backward operands disagree with forward shapes");
    }
    const int64_t b = layout.block_size();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));

    AttentionGrads<Real> grads;
    grads.dq.assign(q.size(), Real(0));
    grads.dk.assign(q.size(), Real(0));
    grads.dv.assign(q.size(), Real(0));

    std::vector<Real> qt(b * head_dim), kt(b * head_dim), vt(b * head_dim), dot_(b * head_dim);
    std::vector<Real> scores(b * b), probs(b * b), dscores(b * b);
    std::vector<Real> dq_acc(b * head_dim), block_grad(b * head_dim);
    std::vector<Real> lse_rows(b), delta_rows(b);
    std::vector<uint8_t> tile(b * b);

    for (int64_t qb = 0; qb < layout.num_query_blocks(); ++qb) {
        const std::vector<VisibleBlock> visible = layout.visible_blocks(qb);
        if (visible.empty()) {
            continue;
        }
        for (int64_t h = 0; h < heads; ++h) {
            gather_head(q, len, heads, head_dim, h, qb * b, b, qt.data());
            gather_head(dout, len, heads, head_dim, h, qb * b, b, dot_.data());
            for (int64_t a = 0; a < b; ++a) {
                const int64_t row = qb * b + a;
                lse_rows[a] = row < len ? fwd.lse[row * heads + h] : neg_inf<Real>();
                Real delta = Real(0);
                if (row < len) {
                    const Real* orow = fwd.out.data() + (row * heads + h) * head_dim;
                    const Real* grow = dot_.data() + a * head_dim;
                    for (int64_t d = 0; d < head_dim; ++d) {
                        delta += orow[d] * grow[d];
                    }
                }
                delta_rows[a] = delta;
            }
            std::fill(dq_acc.begin(), dq_acc.end(), Real(0));

            for (const VisibleBlock& vb : visible) {
                gather_head(k, len, heads, head_dim, h, vb.block * b, b, kt.data());
                gather_head(v, len, heads, head_dim, h, vb.block * b, b, vt.data());
                matmul_nt(qt.data(), kt.data(), scores.data(), b, head_dim, b);
                for (Real& sc : scores) {
                    sc *= scale;
                }
                if (vb.tag == BlockTag::Partial) {
                    layout.inblock_mask(qb, vb.block, tile.data());
                    for (int64_t i = 0; i < b * b; ++i) {
                        if (!tile[i]) {
                            scores[i] = neg_inf<Real>();
                        }
                    }
                }
                // recompute probabilities from the saved lse
                for (int64_t a = 0; a < b; ++a) {
                    Real* prow = probs.data() + a * b;
                    if (lse_rows[a] == neg_inf<Real>()) {
                        std::fill(prow, prow + b, Real(0));
                        continue;
                    }
                    const Real* srow = scores.data() + a * b;
                    for (int64_t c = 0; c < b; ++c) {
                        prow[c] = srow[c] == neg_inf<Real>() ? Real(0)
                                                             : std::exp(srow[c] - lse_rows[a]);
                    }
                }
                // dV += P^T dO
                matmul_tn(probs.data(), dot_.data(), block_grad.data(), b, b, head_dim);
                scatter_add_head(std::span<Real>(grads.dv), len, heads, head_dim, h, vb.block * b,
                                 b, block_grad.data());
                // dP = dO V^T; dS = P * (dP - delta) * scale
                matmul_nt(dot_.data(), vt.data(), dscores.data(), b, head_dim, b);
                for (int64_t a = 0; a < b; ++a) {
                    Real* drow = dscores.data() + a * b;
                    const Real* prow = probs.data() + a * b;
                    for (int64_t c = 0; c < b; ++c) {
                        drow[c] = prow[c] * (drow[c] - delta_rows[a]) * scale;
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                matmul(dscores.data(), kt.data(), dq_acc.data(), b, b, head_dim,
                       /*accumulate=*/true);
                matmul_tn(dscores.data(), qt.data(), block_grad.data(), b, b, head_dim);
                scatter_add_head(std::span<Real>(grads.dk), len, heads, head_dim, h, vb.block * b,
                                 b, block_grad.data());
            }
            scatter_add_head(std::span<Real>(grads.dq), len, heads, head_dim, h, qb * b, b,
                             dq_acc.data());
        }
    }
    return grads;
}

EntryCounts attended_entry_count(int64_t raw_len, const CompressionConfig& config) {
    config.validate();
    if (raw_len <= 0 || raw_len % config.ratio != 0) {
        throw NonDivisibleLength("raw length " + std::to_string(raw_len) +
                                 " is not a positive multiple of ratio " +
                                 std::to_string(config.ratio));
    }
    const uint64_t s = static_cast<uint64_t>(config.sink_count);
    const uint64_t r = static_cast<uint64_t>(config.ratio);
    const uint64_t k = static_cast<uint64_t>(config.window_units);
    const uint64_t units = static_cast<uint64_t>(raw_len) / r;

    // Sum over units of min(k, u): all previous units while u <= k, then k.
    uint64_t window_sum = 0;
    if (units <= k) {
        window_sum = units * (units - 1) / 2;
    } else {
        window_sum = k * (k - 1) / 2 + (units - k) * k;
    }

    // Per unit u the r raw queries see s + u + min(k,u)*r + (w+1) keys each
    // and the gist query sees s + u + 1 + min(k,u)*r + r; summing gives
    // (r+1)*(s + u + min(k,u)*r + 1) + r*(r+1)/2.
    EntryCounts counts;
    counts.sparse_entries = s * (s + 1) / 2 +
                            (r + 1) * (units * (s + 1) + units * (units - 1) / 2 +
                                       r * window_sum) +
                            units * (r * (r + 1) / 2);
    const uint64_t t = static_cast<uint64_t>(raw_len);
    counts.dense_causal_entries = t * (t + 1) / 2;
    return counts;
}

template AttentionOutput<float> dense_masked_attention(std::span<const float>,
                                                       std::span<const float>,
                                                       std::span<const float>, int64_t, int64_t,
                                                       const DenseMask&);
template AttentionOutput<double> dense_masked_attention(std::span<const double>,
                                                        std::span<const double>,
                                                        std::span<const double>, int64_t, int64_t,
                                                        const DenseMask&);
template AttentionGrads<float> dense_masked_attention_backward(
    std::span<const float>, std::span<const float>, std::span<const float>,
    const AttentionOutput<float>&, std::span<const float>, int64_t, int64_t, const DenseMask&);
template AttentionGrads<double> dense_masked_attention_backward(
    std::span<const double>, std::span<const double>, std::span<const double>,
    const AttentionOutput<double>&, std::span<const double>, int64_t, int64_t, const DenseMask&);
template AttentionOutput<float> sparse_forward(std::span<const float>, std::span<const float>,
                                               std::span<const float>, int64_t, int64_t,
                                               const BlockLayout&);
template AttentionOutput<double> sparse_forward(std::span<const double>, std::span<const double>,
                                                std::span<const double>, int64_t, int64_t,
                                                const BlockLayout&);
template AttentionGrads<float> sparse_backward(std::span<const float>, std::span<const float>,
                                               std::span<const float>,
                                               const AttentionOutput<float>&,
                                               std::span<const float>, int64_t, int64_t,
                                               const BlockLayout&);
template AttentionGrads<double> sparse_backward(std::span<const double>, std::span<const double>,
                                                std::span<const double>,
                                                const AttentionOutput<double>&,
                                                std::span<const double>, int64_t, int64_t,
                                                const BlockLayout&);

}  // namespace gistlm
