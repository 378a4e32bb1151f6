// SPDX-License-Identifier: Apache-2.0

#include "gistlm/analytics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>

#include "gistlm/errors.hpp"
#include "gistlm/tensor.hpp"

namespace gistlm {

namespace {

// chunk index of a key's raw position; -1 for sinks (no raw position)
int64_t key_chunk(const TokenSlot& slot, int64_t ratio, int64_t chunk_len) {
    switch (slot.kind) {
        case TokenKind::Sink:
            return -1;
        case TokenKind::Raw:
            return slot.raw_index / chunk_len;
        case TokenKind::Gist:
            return slot.unit_id * ratio / chunk_len;
    }
    return -1;
}

template <typename Real>
double median_ms(std::vector<Real>& samples) {
    std::sort(samples.begin(), samples.end());
    return static_cast<double>(samples[samples.size() / 2]);
}

}  // namespace

template <typename Real>
std::vector<double> attention_mass_profile(const Model<Real>& model,
                                           const std::vector<std::vector<TokenId>>& data,
                                           int64_t chunk_len, TrainPattern pattern,
                                           int64_t train_chunk_len) {
    const ModelConfig& mc = model.model_config();
    const CompressionConfig& cc = model.compression_config();
    if (chunk_len <= 0 || chunk_len % cc.ratio != 0) {
        throw ConfigError("chunk_len must be a positive multiple of the ratio");
    }
    std::vector<double> mass(mc.layers, 0.0);
    int64_t query_count = 0;

    for (const std::vector<TokenId>& tokens : data) {
        AugmentedSequence seq;
        DenseMask mask;
        if (pattern == TrainPattern::ChunkBaseline) {
            ChunkBaselineSpec spec{train_chunk_len, cc.ratio};
            seq = chunk_baseline_sequence(std::span<const TokenId>(tokens), spec,
                                          static_cast<TokenId>(mc.vocab));
            mask = build_chunk_mask(seq.raw_len, spec);
        } else {
            seq = augment(std::span<const TokenId>(tokens), cc,
                          static_cast<TokenId>(mc.vocab));
            mask = build_unified_mask(seq);
        }
        const ForwardTrace<Real> trace = model.forward_trace_with_mask(seq, mask);
        const int64_t n = seq.size();
        const Real scale = Real(1) / std::sqrt(static_cast<Real>(mc.head_dim));

        for (int64_t t = 0; t < n; ++t) {
            const TokenSlot& qslot = seq.slots[t];
            if (qslot.kind != TokenKind::Raw || qslot.raw_index < chunk_len) {
                continue;  // raw queries beyond the first chunk only
            }
            const int64_t qchunk = qslot.raw_index / chunk_len;
            ++query_count;
            for (int64_t l = 0; l < mc.layers; ++l) {
                const auto& lt = trace.layers[l];
                double outside = 0.0;
                for (int64_t h = 0; h < mc.heads; ++h) {
                    const Real lse = lt.attn.lse[t * mc.heads + h];
                    const Real* qrow = lt.q.data() + (t * mc.heads + h) * mc.head_dim;
                    for (int64_t j = 0; j <= t; ++j) {
                        if (!trace.mask.at(t, j)) {
                            continue;
                        }
                        const int64_t kchunk = key_chunk(seq.slots[j], cc.ratio, chunk_len);
                        if (kchunk < 0 || kchunk >= qchunk) {
                            continue;
                        }
                        const Real* krow = lt.k.data() + (j * mc.heads + h) * mc.head_dim;
                        Real dot = Real(0);
                        for (int64_t d = 0; d < mc.head_dim; ++d) {
                            dot += qrow[d] * krow[d];
                        }
                        outside += std::exp(static_cast<double>(dot * scale - lse));
                    }
                }
                mass[l] += outside / static_cast<double>(mc.heads);
            }
        }
    }
    if (query_count > 0) {
        for (double& m : mass) {
            m /= static_cast<double>(query_count);
        }
    }
    return mass;
}

std::vector<BenchRecord> bench(const std::vector<int64_t>& lengths,
                               const std::vector<int64_t>& ratios,
                               const CompressionConfig& base, int64_t repeats, int64_t heads,
                               int64_t head_dim) {
    using clock = std::chrono::steady_clock;
    std::vector<BenchRecord> records;

    for (const int64_t t : lengths) {
        for (const int64_t r : ratios) {
            CompressionConfig cfg = base;
            cfg.ratio = r;
            const EntryCounts counts = attended_entry_count(t, cfg);

            double fwd_sparse = 0.0, fwd_dense = 0.0, bwd_sparse = 0.0, bwd_dense = 0.0;
            if (repeats > 0) {
                const BlockLayout sparse_layout = BlockLayout::unified(t, cfg);
                const BlockLayout dense_layout = BlockLayout::causal(t, cfg.block_size);

                std::mt19937_64 rng(42);
                const int64_t sparse_n = sparse_layout.padded_len() * heads * head_dim;
                const int64_t dense_n = dense_layout.padded_len() * heads * head_dim;
                std::vector<float> qs(sparse_n), ks(sparse_n), vs(sparse_n);
                fill_normal(qs, rng, 1.0);
                fill_normal(ks, rng, 1.0);
                fill_normal(vs, rng, 1.0);
                std::vector<float> qd(qs.begin(), qs.begin() + std::min(sparse_n, dense_n));
                qd.resize(dense_n);
                const std::vector<float>& kd = qd;

                const auto time_runs = [&](auto&& fn) {
                    std::vector<double> ms(repeats);
                    for (int64_t i = 0; i < repeats; ++i) {
                        const auto start = clock::now();
                        fn();
                        ms[i] = std::chrono::duration<double, std::milli>(clock::now() - start)
                                    .count();
                    }
                    return median_ms(ms);
                };

                AttentionOutput<float> sparse_out, dense_out;
                fwd_sparse = time_runs([&] {
                    sparse_out = sparse_forward(std::span<const float>(qs),
                                                std::span<const float>(ks),
                                                std::span<const float>(vs), heads, head_dim,
                                                sparse_layout);
                });
                fwd_dense = time_runs([&] {
                    dense_out = sparse_forward(std::span<const float>(qd),
                                               std::span<const float>(kd),
                                               std::span<const float>(qd), heads, head_dim,
                                               dense_layout);
                });
                bwd_sparse = time_runs([&] {
                    sparse_backward(std::span<const float>(qs), std::span<const float>(ks),
                                    std::span<const float>(vs), sparse_out,
                                    std::span<const float>(vs), heads, head_dim, sparse_layout);
                });
                bwd_dense = time_runs([&] {
                    sparse_backward(std::span<const float>(qd), std::span<const float>(kd),
                                    std::span<const float>(qd), dense_out,
                                    std::span<const float>(qd), heads, head_dim, dense_layout);
                });
            }

            for (const char* direction : {"forward", "backward"}) {
                BenchRecord rec;
                rec.raw_len = t;
                rec.ratio = r;
                rec.direction = direction;
                rec.sparse_entries = counts.sparse_entries;
                rec.dense_entries = counts.dense_causal_entries;
                rec.entry_ratio = counts.ratio();
                rec.host_ms_sparse = direction == std::string("forward") ? fwd_sparse : bwd_sparse;
                rec.host_ms_dense = direction == std::string("forward") ? fwd_dense : bwd_dense;
                records.push_back(std::move(rec));
            }
        }
    }
    return records;
}

void write_bench_csv(const std::vector<BenchRecord>& records, std::ostream& out) {
    out << "T,ratio,direction,sparse_entries,dense_entries,entry_ratio,host_ms_sparse,"
           "host_ms_dense\n";
    for (const BenchRecord& r : records) {
        out << r.raw_len << ',' << r.ratio << ',' << r.direction << ',' << r.sparse_entries << ','
            << r.dense_entries << ',' << r.entry_ratio << ',' << r.host_ms_sparse << ','
            << r.host_ms_dense << '\n';
    }
}

void write_boundary_csv(const BoundaryProfile& profile, std::ostream& out) {
    out << "rel_pos,mean_ce,count\n";
    for (size_t i = 0; i < profile.mean_ce.size(); ++i) {
        out << i << ',' << profile.mean_ce[i] << ',' << profile.count[i] << '\n';
    }
}

void write_attn_stats_csv(const std::vector<double>& per_layer_mass, std::ostream& out) {
    out << "layer,cross_chunk_mass\n";
    for (size_t l = 0; l < per_layer_mass.size(); ++l) {
        out << l << ',' << per_layer_mass[l] << '\n';
    }
}

void write_trace_csv(const std::vector<TraceRow>& rows, std::ostream& out) {
    out << "step,layer,sinks,gists,raws\n";
    for (const TraceRow& r : rows) {
        out << r.step << ',' << r.layer << ',' << r.sinks << ',' << r.gists << ',' << r.raws
            << '\n';
    }
}

template std::vector<double> attention_mass_profile(const Model<float>&,
                                                    const std::vector<std::vector<TokenId>>&,
                                                    int64_t, TrainPattern, int64_t);
template std::vector<double> attention_mass_profile(const Model<double>&,
                                                    const std::vector<std::vector<TokenId>>&,
                                                    int64_t, TrainPattern, int64_t);

}  // namespace gistlm
