// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gistlm/attention.hpp"
#include "gistlm/model.hpp"

namespace gistlm {

/// Mean fraction of softmax mass each raw query (in chunks after the first)
/// assigns to keys whose raw position lies in an earlier chunk, per layer.
/// Gist keys count at their unit's raw span; sink keys have no raw position
/// and never count as cross-chunk mass.
template <typename Real>
std::vector<double> attention_mass_profile(const Model<Real>& model,
                                           const std::vector<std::vector<TokenId>>& data,
                                           int64_t chunk_len, TrainPattern pattern,
                                           int64_t train_chunk_len = 0);

struct BenchRecord {
    int64_t raw_len = 0;
    int64_t ratio = 0;
    std::string direction;  // "forward" or "backward"
    uint64_t sparse_entries = 0;
    uint64_t dense_entries = 0;
    double entry_ratio = 0.0;
    double host_ms_sparse = 0.0;  // 0 when timing is skipped (repeats == 0)
    double host_ms_dense = 0.0;
};

/// Entry-count analytics plus optional host timing of one attention layer
/// (forward and backward, single precision) per (length, ratio) pair. Entry
/// counts are exact integer arithmetic; timings are medians over `repeats`
/// runs and reported as trends only.
std::vector<BenchRecord> bench(const std::vector<int64_t>& lengths,
                               const std::vector<int64_t>& ratios,
                               const CompressionConfig& base, int64_t repeats,
                               int64_t heads = 1, int64_t head_dim = 32);

void write_bench_csv(const std::vector<BenchRecord>& records, std::ostream& out);
void write_boundary_csv(const BoundaryProfile& profile, std::ostream& out);
void write_attn_stats_csv(const std::vector<double>& per_layer_mass, std::ostream& out);

struct TraceRow {
    int64_t step;
    int64_t layer;
    int64_t sinks;
    int64_t gists;
    int64_t raws;
};

void write_trace_csv(const std::vector<TraceRow>& rows, std::ostream& out);

}  // namespace gistlm
