// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "gistlm/attention.hpp"
#include "gistlm/errors.hpp"
#include "gistlm/gist_shift.hpp"
#include "gistlm/visibility.hpp"

using namespace gistlm;

namespace {

CompressionConfig make_config(int64_t r, int64_t s, int64_t k, int64_t b) {
    CompressionConfig cfg;
    cfg.ratio = r;
    cfg.sink_count = s;
    cfg.window_units = k;
    cfg.block_size = b;
    return cfg;
}

std::vector<TokenId> iota_tokens(int64_t n) {
    std::vector<TokenId> tokens(n);
    for (int64_t i = 0; i < n; ++i) {
        tokens[i] = static_cast<TokenId>(i % 500);
    }
    return tokens;
}

std::vector<double> random_tensor(int64_t n, std::mt19937_64& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> out(n);
    for (double& x : out) {
        x = dist(rng);
    }
    return out;
}

// Straightforward per-row two-pass softmax attention, written independently
// of the library path; the second oracle the reference path is checked
// against. Also asserts row-stochasticity of the implied weights.
std::vector<double> loop_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                const std::vector<double>& v, int64_t heads, int64_t dim,
                                const DenseMask& mask, double tol = 1e-12) {
    const int64_t len = mask.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<double> out(len * heads * dim, 0.0);
    for (int64_t t = 0; t < len; ++t) {
        for (int64_t h = 0; h < heads; ++h) {
            std::vector<double> scores;
            std::vector<int64_t> cols;
            for (int64_t j = 0; j < len; ++j) {
                if (!mask.at(t, j)) {
                    continue;
                }
                double dot = 0.0;
                for (int64_t d = 0; d < dim; ++d) {
                    dot += q[(t * heads + h) * dim + d] * k[(j * heads + h) * dim + d];
                }
                scores.push_back(dot * scale);
                cols.push_back(j);
            }
            if (scores.empty()) {
                continue;
            }
            const double mx = *std::max_element(scores.begin(), scores.end());
            double denom = 0.0;
            for (double& sc : scores) {
                sc = std::exp(sc - mx);
                denom += sc;
            }
            double weight_sum = 0.0;
            for (size_t i = 0; i < cols.size(); ++i) {
                const double w = scores[i] / denom;
                weight_sum += w;
                for (int64_t d = 0; d < dim; ++d) {
                    out[(t * heads + h) * dim + d] += w * v[(cols[i] * heads + h) * dim + d];
                }
            }
            EXPECT_NEAR(weight_sum, 1.0, tol);
        }
    }
    return out;
}

struct SparseCase {
    AugmentedSequence seq;
    ShiftPermutation shift;
    BlockLayout layout;
    DenseMask mask;
};

SparseCase make_case(int64_t raw_len, const CompressionConfig& cfg) {
    SparseCase c{augment(iota_tokens(raw_len), cfg, 600),
                 ShiftPermutation{},
                 BlockLayout::unified(raw_len, cfg),
                 DenseMask{}};
    c.shift = gist_shift(c.seq, cfg.block_size);
    c.mask = build_unified_mask(c.seq);
    return c;
}

std::vector<double> permute(const std::vector<double>& x, const std::vector<int64_t>& perm,
                            int64_t row) {
    std::vector<double> out(perm.size() * row, 0.0);
    for (size_t p = 0; p < perm.size(); ++p) {
        if (perm[p] >= 0) {
            std::copy(x.begin() + perm[p] * row, x.begin() + (perm[p] + 1) * row,
                      out.begin() + p * row);
        }
    }
    return out;
}

std::vector<double> unpermute(const std::vector<double>& x, const std::vector<int64_t>& perm,
                              int64_t rows, int64_t row) {
    std::vector<double> out(rows * row, 0.0);
    for (size_t p = 0; p < perm.size(); ++p) {
        if (perm[p] >= 0) {
            std::copy(x.begin() + p * row, x.begin() + (p + 1) * row,
                      out.begin() + perm[p] * row);
        }
    }
    return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

}  // namespace

TEST(DenseAttention, IdentityMaskReturnsValues) {
    const int64_t len = 6, heads = 2, dim = 4;
    std::mt19937_64 rng(1);
    const auto q = random_tensor(len * heads * dim, rng);
    const auto k = random_tensor(len * heads * dim, rng);
    const auto v = random_tensor(len * heads * dim, rng);
    DenseMask identity(len, len);
    for (int64_t t = 0; t < len; ++t) {
        identity.set(t, t, true);
    }
    const auto out = dense_masked_attention<double>(q, k, v, heads, dim, identity);
    EXPECT_LT(max_abs_diff(out.out, v), 1e-15);
}

TEST(DenseAttention, TwoTokenClosedForm) {
    const int64_t heads = 1, dim = 2;
    const std::vector<double> q{0.3, -0.1, 0.7, 0.2};
    const std::vector<double> k{0.5, 0.4, -0.2, 0.9};
    const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
    DenseMask causal(2, 2);
    causal.set(0, 0, true);
    causal.set(1, 0, true);
    causal.set(1, 1, true);
    const auto out = dense_masked_attention<double>(q, k, v, heads, dim, causal);

    const double scale = 1.0 / std::sqrt(2.0);
    const double s1 = (0.7 * 0.5 + 0.2 * 0.4) * scale;
    const double s2 = (0.7 * -0.2 + 0.2 * 0.9) * scale;
    const double w1 = std::exp(s1) / (std::exp(s1) + std::exp(s2));
    const double w2 = 1.0 - w1;
    EXPECT_NEAR(out.out[2], w1 * 1.0 + w2 * 3.0, 1e-14);
    EXPECT_NEAR(out.out[3], w1 * 2.0 + w2 * 4.0, 1e-14);
    EXPECT_LT(max_abs_diff({out.out[0], out.out[1]}, {1.0, 2.0}), 1e-15);
}

TEST(DenseAttention, MatchesLoopOracle) {
    const CompressionConfig cfg = make_config(4, 2, 1, 8);
    const SparseCase c = make_case(64, cfg);
    const int64_t heads = 2, dim = 8;
    std::mt19937_64 rng(3);
    const int64_t n = c.seq.size() * heads * dim;
    const auto q = random_tensor(n, rng), k = random_tensor(n, rng), v = random_tensor(n, rng);
    const auto got = dense_masked_attention<double>(q, k, v, heads, dim, c.mask);
    const auto expected = loop_oracle(q, k, v, heads, dim, c.mask);
    EXPECT_LT(max_abs_diff(got.out, expected), 1e-12);
}

TEST(DenseAttention, RowStochasticityViaLse) {
    // weights recomputed from the implementation's own lse must sum to 1
    const SparseCase c = make_case(32, make_config(2, 1, 1, 8));
    const int64_t heads = 1, dim = 4;
    std::mt19937_64 rng(4);
    const int64_t n = c.seq.size() * heads * dim;
    const auto q = random_tensor(n, rng), k = random_tensor(n, rng), v = random_tensor(n, rng);
    const auto out = dense_masked_attention<double>(q, k, v, heads, dim, c.mask);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (int64_t t = 0; t < c.seq.size(); ++t) {
        double sum = 0.0;
        for (int64_t j = 0; j <= t; ++j) {
            if (!c.mask.at(t, j)) {
                continue;
            }
            double dot = 0.0;
            for (int64_t d = 0; d < dim; ++d) {
                dot += q[t * dim + d] * k[j * dim + d];
            }
            sum += std::exp(dot * scale - out.lse[t]);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(SparseForward, MatchesDenseOracleOnGrid) {
    std::mt19937_64 rng(5);
    for (const int64_t r : {2, 4}) {
        for (const int64_t k : {0, 1, 32}) {
            for (const int64_t b : {8, 16}) {
                for (const int64_t heads : {1, 4}) {
                    const CompressionConfig cfg = make_config(r, 4, k, b);
                    const SparseCase c = make_case(16 * r, cfg);
                    const int64_t dim = 8;
                    const int64_t n = c.seq.size() * heads * dim;
                    const auto q = random_tensor(n, rng);
                    const auto kk = random_tensor(n, rng);
                    const auto v = random_tensor(n, rng);
                    const auto dense = dense_masked_attention<double>(q, kk, v, heads, dim, c.mask);

                    const int64_t row = heads * dim;
                    const auto qs = permute(q, c.shift.perm, row);
                    const auto ks = permute(kk, c.shift.perm, row);
                    const auto vs = permute(v, c.shift.perm, row);
                    const auto sparse =
                        sparse_forward<double>(qs, ks, vs, heads, dim, c.layout);
                    const auto out = unpermute(sparse.out, c.shift.perm, c.seq.size(), row);
                    EXPECT_LT(max_abs_diff(out, dense.out), 1e-10)
                        << "r=" << r << " k=" << k << " B=" << b << " H=" << heads;
                }
            }
        }
    }
}

TEST(SparseForward, SinglePrecisionTolerance) {
    const CompressionConfig cfg = make_config(4, 4, 1, 16);
    const SparseCase c = make_case(256, cfg);
    const int64_t heads = 2, dim = 16;
    std::mt19937_64 rng(6);
    const int64_t n = c.seq.size() * heads * dim;
    const auto q64 = random_tensor(n, rng), k64 = random_tensor(n, rng),
               v64 = random_tensor(n, rng);
    std::vector<float> q(q64.begin(), q64.end()), k(k64.begin(), k64.end()),
        v(v64.begin(), v64.end());

    const auto dense = dense_masked_attention<float>(q, k, v, heads, dim, c.mask);
    const int64_t row = heads * dim;
    std::vector<float> qs(c.shift.padded_len * row, 0.f), ks(qs), vs(qs);
    for (int64_t p = 0; p < c.shift.padded_len; ++p) {
        if (c.shift.perm[p] < 0) {
            continue;
        }
        for (int64_t i = 0; i < row; ++i) {
            qs[p * row + i] = q[c.shift.perm[p] * row + i];
            ks[p * row + i] = k[c.shift.perm[p] * row + i];
            vs[p * row + i] = v[c.shift.perm[p] * row + i];
        }
    }
    const auto sparse = sparse_forward<float>(qs, ks, vs, heads, dim, c.layout);
    float worst = 0.f;
    for (int64_t p = 0; p < c.shift.padded_len; ++p) {
        if (c.shift.perm[p] < 0) {
            continue;
        }
        for (int64_t i = 0; i < row; ++i) {
            worst = std::max(worst, std::abs(sparse.out[p * row + i] -
                                             dense.out[c.shift.perm[p] * row + i]));
        }
    }
    EXPECT_LT(worst, 2e-4f);
}

TEST(SparseForward, BlockSizeInvariance) {
    std::mt19937_64 rng(7);
    const int64_t heads = 2, dim = 8, raw_len = 64;
    const CompressionConfig small = make_config(4, 4, 1, 8);
    const CompressionConfig large = make_config(4, 4, 1, 64);
    const SparseCase a = make_case(raw_len, small);
    const SparseCase b = make_case(raw_len, large);
    const int64_t n = a.seq.size() * heads * dim;
    const auto q = random_tensor(n, rng), k = random_tensor(n, rng), v = random_tensor(n, rng);
    const int64_t row = heads * dim;

    const auto out_a =
        unpermute(sparse_forward<double>(permute(q, a.shift.perm, row),
                                         permute(k, a.shift.perm, row),
                                         permute(v, a.shift.perm, row), heads, dim, a.layout)
                      .out,
                  a.shift.perm, a.seq.size(), row);
    const auto out_b =
        unpermute(sparse_forward<double>(permute(q, b.shift.perm, row),
                                         permute(k, b.shift.perm, row),
                                         permute(v, b.shift.perm, row), heads, dim, b.layout)
                      .out,
                  b.shift.perm, b.seq.size(), row);
    EXPECT_LT(max_abs_diff(out_a, out_b), 1e-10);
}

TEST(SparseForward, CausalLayoutEqualsPlainCausalAttention) {
    // degenerate gist-free path: the causal block layout must reproduce
    // dense causal attention exactly
    const int64_t len = 45, heads = 2, dim = 8;
    std::mt19937_64 rng(8);
    const auto q = random_tensor(len * heads * dim, rng);
    const auto k = random_tensor(len * heads * dim, rng);
    const auto v = random_tensor(len * heads * dim, rng);
    DenseMask causal(len, len);
    for (int64_t t = 0; t < len; ++t) {
        for (int64_t j = 0; j <= t; ++j) {
            causal.set(t, j, true);
        }
    }
    const auto dense = dense_masked_attention<double>(q, k, v, heads, dim, causal);

    const BlockLayout layout = BlockLayout::causal(len, 16);
    const int64_t row = heads * dim;
    std::vector<double> qp(layout.padded_len() * row, 0.0), kp(qp), vp(qp);
    std::copy(q.begin(), q.end(), qp.begin());
    std::copy(k.begin(), k.end(), kp.begin());
    std::copy(v.begin(), v.end(), vp.begin());
    const auto sparse = sparse_forward<double>(qp, kp, vp, heads, dim, layout);
    double worst = 0.0;
    for (int64_t i = 0; i < len * row; ++i) {
        worst = std::max(worst, std::abs(sparse.out[i] - dense.out[i]));
    }
    EXPECT_LT(worst, 1e-10);
    // pad rows: zero output, -inf lse
    for (int64_t p = len; p < layout.padded_len(); ++p) {
        for (int64_t i = 0; i < row; ++i) {
            EXPECT_EQ(sparse.out[p * row + i], 0.0);
        }
        for (int64_t h = 0; h < heads; ++h) {
            EXPECT_TRUE(std::isinf(sparse.lse[p * heads + h]));
        }
    }
}

TEST(SparseBackward, ZeroUpstreamGivesZeroGrads) {
    const SparseCase c = make_case(32, make_config(4, 2, 1, 8));
    const int64_t heads = 2, dim = 4, row = heads * dim;
    std::mt19937_64 rng(9);
    const int64_t n = c.shift.padded_len * row;
    std::vector<double> qs = random_tensor(n, rng), ks = random_tensor(n, rng),
                        vs = random_tensor(n, rng);
    const auto fwd = sparse_forward<double>(qs, ks, vs, heads, dim, c.layout);
    const std::vector<double> dout(n, 0.0);
    const auto grads = sparse_backward<double>(qs, ks, vs, fwd, dout, heads, dim, c.layout);
    for (const double g : grads.dq) {
        EXPECT_EQ(g, 0.0);
    }
    for (const double g : grads.dk) {
        EXPECT_EQ(g, 0.0);
    }
    for (const double g : grads.dv) {
        EXPECT_EQ(g, 0.0);
    }
}

TEST(DenseBackward, SingleKeyRowsRouteStraightThrough) {
    // softmax over one element is constant: dV = dO, dQ = dK = 0
    const int64_t len = 4, heads = 1, dim = 3;
    std::mt19937_64 rng(10);
    const auto q = random_tensor(len * dim, rng), k = random_tensor(len * dim, rng),
               v = random_tensor(len * dim, rng), dout = random_tensor(len * dim, rng);
    DenseMask identity(len, len);
    for (int64_t t = 0; t < len; ++t) {
        identity.set(t, t, true);
    }
    const auto fwd = dense_masked_attention<double>(q, k, v, heads, dim, identity);
    const auto grads =
        dense_masked_attention_backward<double>(q, k, v, fwd, dout, heads, dim, identity);
    EXPECT_LT(max_abs_diff(grads.dv, dout), 1e-14);
    for (const double g : grads.dq) {
        EXPECT_NEAR(g, 0.0, 1e-14);
    }
    for (const double g : grads.dk) {
        EXPECT_NEAR(g, 0.0, 1e-14);
    }
}

TEST(SparseBackward, MatchesCentralFiniteDifferences) {
    // loss = sum(out * dout) with fixed dout; forward for the difference
    // quotient runs through the dense oracle so the check is independent.
    const CompressionConfig cfg = make_config(4, 2, 1, 8);
    const int64_t raw_len = 32, heads = 2, dim = 4, row = heads * dim;
    const SparseCase c = make_case(raw_len, cfg);
    std::mt19937_64 rng(11);
    const int64_t n = c.seq.size() * row;
    std::vector<double> q = random_tensor(n, rng), k = random_tensor(n, rng),
                        v = random_tensor(n, rng);
    const auto dout = random_tensor(n, rng);

    const auto qs = permute(q, c.shift.perm, row), ks = permute(k, c.shift.perm, row),
               vs = permute(v, c.shift.perm, row), dos = permute(dout, c.shift.perm, row);
    const auto fwd = sparse_forward<double>(qs, ks, vs, heads, dim, c.layout);
    const auto sg = sparse_backward<double>(qs, ks, vs, fwd, dos, heads, dim, c.layout);
    const auto dq = unpermute(sg.dq, c.shift.perm, c.seq.size(), row);
    const auto dk = unpermute(sg.dk, c.shift.perm, c.seq.size(), row);
    const auto dv = unpermute(sg.dv, c.shift.perm, c.seq.size(), row);

    const auto loss = [&](const std::vector<double>& qq, const std::vector<double>& kk,
                          const std::vector<double>& vv) {
        const auto out = dense_masked_attention<double>(qq, kk, vv, heads, dim, c.mask);
        double l = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            l += out.out[i] * dout[i];
        }
        return l;
    };

    const double eps = 1e-5;
    std::uniform_int_distribution<int64_t> coord(0, n - 1);
    int checked = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const int64_t i = coord(rng);
        const int which = trial % 3;
        std::vector<double>*tensor = which == 0 ? &q : which == 1 ? &k : &v;
        const double analytic = which == 0 ? dq[i] : which == 1 ? dk[i] : dv[i];
        const double saved = (*tensor)[i];
        (*tensor)[i] = saved + eps;
        const double upper = loss(q, k, v);
        (*tensor)[i] = saved - eps;
        const double lower = loss(q, k, v);
        (*tensor)[i] = saved;
        const double numeric = (upper - lower) / (2.0 * eps);
        if (std::abs(numeric) < 1e-10 && std::abs(analytic) < 1e-10) {
            continue;
        }
        const double rel = std::abs(analytic - numeric) /
                           std::max({std::abs(analytic), std::abs(numeric), 1e-12});
        EXPECT_LT(rel, 1e-6) << "tensor " << which << " coord " << i;
        ++checked;
    }
    EXPECT_GE(checked, 60);
}

TEST(SparseBackward, PadSlotGradsExactlyZero) {
    const SparseCase c = make_case(12, make_config(4, 1, 0, 16));  // T'=16 pads to 16? pad none
    const SparseCase d = make_case(8, make_config(4, 1, 0, 16));   // T'=11 pads to 16
    const int64_t heads = 1, dim = 4, row = heads * dim;
    std::mt19937_64 rng(12);
    const int64_t n = d.shift.padded_len * row;
    const auto qs = random_tensor(n, rng), ks = random_tensor(n, rng), vs = random_tensor(n, rng),
               dout = random_tensor(n, rng);
    const auto fwd = sparse_forward<double>(qs, ks, vs, heads, dim, d.layout);
    const auto grads = sparse_backward<double>(qs, ks, vs, fwd, dout, heads, dim, d.layout);
    for (int64_t p = 0; p < d.shift.padded_len; ++p) {
        if (d.shift.perm[p] >= 0) {
            continue;
        }
        for (int64_t i = 0; i < row; ++i) {
            EXPECT_EQ(grads.dq[p * row + i], 0.0);
            EXPECT_EQ(grads.dk[p * row + i], 0.0);
            EXPECT_EQ(grads.dv[p * row + i], 0.0);
        }
    }
    (void)c;
}

TEST(EntryCount, MatchesBruteForceCounting) {
    for (const int64_t r : {2, 4, 8}) {
        for (const int64_t s : {0, 1, 16}) {
            for (const int64_t k : {0, 1, 32}) {
                for (const int64_t units : {1, 2, 7, 40}) {
                    const CompressionConfig cfg = make_config(r, s, k, 8);
                    const int64_t t = units * r;
                    const AugmentedSequence seq = augment(iota_tokens(t), cfg, 600);
                    const uint64_t brute = build_unified_mask(seq).count();
                    const EntryCounts counts = attended_entry_count(t, cfg);
                    EXPECT_EQ(counts.sparse_entries, brute)
                        << "r=" << r << " s=" << s << " k=" << k << " T=" << t;
                    EXPECT_EQ(counts.dense_causal_entries,
                              static_cast<uint64_t>(t) * (t + 1) / 2);
                }
            }
        }
    }
}

TEST(EntryCount, MonotoneInWindowAndSinks) {
    const int64_t t = 4096;
    uint64_t prev = 0;
    for (const int64_t k : {0, 1, 2, 8, 32, 128}) {
        const uint64_t entries = attended_entry_count(t, make_config(4, 16, k, 8)).sparse_entries;
        EXPECT_GE(entries, prev);
        prev = entries;
    }
    prev = 0;
    for (const int64_t s : {0, 1, 16, 128}) {
        const uint64_t entries = attended_entry_count(t, make_config(4, s, 4, 8)).sparse_entries;
        EXPECT_GE(entries, prev);
        prev = entries;
    }
}

TEST(EntryCount, MinimalSequenceIsOverheadRegime) {
    const EntryCounts counts = attended_entry_count(4, make_config(4, 128, 32, 8));
    EXPECT_LT(counts.ratio(), 1.0);
}

TEST(EntryCount, RejectsNonDivisible) {
    EXPECT_THROW(attended_entry_count(6, make_config(4, 0, 0, 8)), NonDivisibleLength);
}

TEST(Attention, ShapeChecks) {
    const SparseCase c = make_case(8, make_config(4, 1, 0, 8));
    std::vector<double> wrong(5, 0.0);
    EXPECT_THROW(dense_masked_attention<double>(wrong, wrong, wrong, 1, 4, c.mask),
                 ShapeMismatch);
    EXPECT_THROW(sparse_forward<double>(wrong, wrong, wrong, 1, 4, c.layout), ShapeMismatch);
}
