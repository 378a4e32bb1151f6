// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "gistlm/analytics.hpp"
#include "gistlm/errors.hpp"
#include "gistlm/tasks.hpp"

using namespace gistlm;

namespace {

CompressionConfig make_comp(int64_t r, int64_t s, int64_t k, int64_t b = 8) {
    CompressionConfig cfg;
    cfg.ratio = r;
    cfg.sink_count = s;
    cfg.window_units = k;
    cfg.block_size = b;
    return cfg;
}

ModelConfig make_model(int64_t layers, int64_t heads, int64_t head_dim, int64_t vocab,
                       uint64_t seed) {
    ModelConfig cfg;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.head_dim = head_dim;
    cfg.hidden_mult = 2;
    cfg.vocab = vocab;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST(Tasks, CopySecondHalfEqualsFirst) {
    SynthTaskSpec spec;
    spec.kind = TaskKind::Copy;
    spec.vocab = 32;
    spec.seq_len = 64;
    spec.seed = 5;
    const auto instances = gen_task(spec, 3);
    ASSERT_EQ(instances.size(), 3u);
    for (const TaskInstance& inst : instances) {
        ASSERT_EQ(inst.tokens.size(), 64u);
        for (int64_t i = 0; i < 32; ++i) {
            EXPECT_EQ(inst.tokens[i], inst.tokens[32 + i]);
        }
        EXPECT_EQ(inst.eval_positions.size(), 32u);
        EXPECT_EQ(inst.eval_positions.front(), 32);
    }
}

TEST(Tasks, KvRecallPlacement) {
    SynthTaskSpec spec;
    spec.kind = TaskKind::KvRecall;
    spec.vocab = 64;
    spec.seq_len = 64;
    spec.needle_distance = 0;  // query adjacent to the fact
    spec.seed = 9;
    const KvRecallVocab v = kv_recall_vocab(spec.vocab);
    const auto instances = gen_task(spec, 4);
    for (const TaskInstance& inst : instances) {
        const auto& t = inst.tokens;
        const int64_t n = spec.seq_len;
        EXPECT_EQ(t[n - 3], v.query_marker);
        // fact directly before the query marker
        EXPECT_EQ(t[n - 5], t[n - 2]);  // key repeated in the query
        EXPECT_EQ(t[n - 4], t[n - 1]);  // value is the answer
        EXPECT_GE(t[n - 1], v.value_base);
        EXPECT_LT(t[n - 1], v.value_base + v.value_count);
        ASSERT_EQ(inst.eval_positions.size(), 1u);
        EXPECT_EQ(inst.eval_positions[0], n - 1);
    }

    SynthTaskSpec far = spec;
    far.needle_distance = 40;
    const auto inst = gen_task(far, 1)[0];
    const int64_t fact_pos = far.seq_len - 5 - 40;
    EXPECT_NE(inst.tokens[fact_pos], v.filler);
    for (int64_t i = fact_pos + 2; i < far.seq_len - 3; ++i) {
        EXPECT_EQ(inst.tokens[i], v.filler);
    }
}

TEST(Tasks, DeterministicGivenSeed) {
    SynthTaskSpec spec;
    spec.kind = TaskKind::CharLm;
    spec.vocab = 64;
    spec.seq_len = 128;
    spec.seed = 1234;
    const auto a = gen_task(spec, 5);
    const auto b = gen_task(spec, 5);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].tokens, b[i].tokens);
    }
    spec.seed = 1235;
    const auto c = gen_task(spec, 5);
    EXPECT_NE(a[0].tokens, c[0].tokens);
}

TEST(Tasks, CharLmIsMostlyPeriodic) {
    SynthTaskSpec spec;
    spec.kind = TaskKind::CharLm;
    spec.vocab = 64;
    spec.seq_len = 512;
    spec.seed = 7;
    const auto instances = gen_task(spec, 4);
    for (const TaskInstance& inst : instances) {
        // the motif repeats with fixed period T/16, up to the 2% noise
        const int64_t period = 512 / 32;
        int64_t hits = 0, total = 0;
        for (int64_t i = period; i < 512; ++i) {
            hits += inst.tokens[i] == inst.tokens[i - period];
            ++total;
        }
        EXPECT_GT(static_cast<double>(hits) / total, 0.9);
        // distinct sequences carry distinct motifs
        EXPECT_NE(instances[0].tokens, instances.size() > 1 ? instances[1].tokens
                                                            : std::vector<TokenId>{});
    }
}

TEST(AttentionMass, SingleChunkIsZero) {
    const CompressionConfig comp = make_comp(4, 2, 1, 8);
    const Model<double> model(make_model(2, 2, 4, 32, 3), comp);
    const std::vector<std::vector<TokenId>> data{std::vector<TokenId>(16, 5)};
    const auto mass = attention_mass_profile(model, data, 16, TrainPattern::Unified);
    ASSERT_EQ(mass.size(), 2u);
    EXPECT_EQ(mass[0], 0.0);
    EXPECT_EQ(mass[1], 0.0);
}

TEST(AttentionMass, UniformScoresMatchVisibleKeyFractions) {
    const CompressionConfig comp = make_comp(4, 2, 1, 8);
    Model<double> model(make_model(2, 2, 4, 32, 11), comp);
    for (auto& layer : model.params().layers) {
        std::fill(layer.wq.begin(), layer.wq.end(), 0.0);
        std::fill(layer.wk.begin(), layer.wk.end(), 0.0);
    }

    const int64_t chunk_len = 16;
    std::vector<TokenId> tokens(64);
    for (size_t i = 0; i < tokens.size(); ++i) {
        tokens[i] = static_cast<TokenId>(i % 32);
    }
    const std::vector<std::vector<TokenId>> data{tokens};
    const auto mass = attention_mass_profile(model, data, chunk_len, TrainPattern::Unified);

    // expected: mean over raw queries (chunks >= 1) of
    // |visible keys with earlier raw chunk| / |visible keys|
    const AugmentedSequence seq = augment(tokens, comp, 32);
    const DenseMask mask = build_unified_mask(seq);
    double expected = 0.0;
    int64_t queries = 0;
    for (int64_t t = 0; t < seq.size(); ++t) {
        if (seq.slots[t].kind != TokenKind::Raw || seq.slots[t].raw_index < chunk_len) {
            continue;
        }
        const int64_t qchunk = seq.slots[t].raw_index / chunk_len;
        int64_t visible = 0, outside = 0;
        for (int64_t j = 0; j <= t; ++j) {
            if (!mask.at(t, j)) {
                continue;
            }
            ++visible;
            const TokenSlot& key = seq.slots[j];
            int64_t kchunk = -1;
            if (key.kind == TokenKind::Raw) {
                kchunk = key.raw_index / chunk_len;
            } else if (key.kind == TokenKind::Gist) {
                kchunk = key.unit_id * comp.ratio / chunk_len;
            }
            outside += kchunk >= 0 && kchunk < qchunk;
        }
        expected += static_cast<double>(outside) / static_cast<double>(visible);
        ++queries;
    }
    expected /= static_cast<double>(queries);

    for (const double m : mass) {
        EXPECT_NEAR(m, expected, 1e-9);
    }
}

TEST(Bench, RowArithmeticAndSchema) {
    const CompressionConfig base = make_comp(4, 128, 32, 64);
    const auto records = bench({16384, 131072}, {4, 8}, base, /*repeats=*/0);
    EXPECT_EQ(records.size(), 8u);  // 2 lengths x 2 ratios x 2 directions

    std::ostringstream out;
    write_bench_csv(records, out);
    std::istringstream in(out.str());
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header,
              "T,ratio,direction,sparse_entries,dense_entries,entry_ratio,host_ms_sparse,"
              "host_ms_dense");
    int64_t rows = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_NE(line.find(','), std::string::npos);
    }
    EXPECT_EQ(rows, 8);
    for (const BenchRecord& rec : records) {
        EXPECT_GT(rec.entry_ratio, 0.0);
        EXPECT_TRUE(std::isfinite(rec.entry_ratio));
        EXPECT_TRUE(std::isfinite(rec.host_ms_sparse));
        EXPECT_TRUE(std::isfinite(rec.host_ms_dense));
    }
}

TEST(Bench, EntryRatioMonotoneInLengthAndRatio) {
    const CompressionConfig base = make_comp(4, 128, 32, 64);
    const std::vector<int64_t> grid{16384, 32768, 65536, 131072};
    const auto records = bench(grid, {4, 8}, base, 0);

    double prev4 = 0.0, prev8 = 0.0;
    for (const BenchRecord& rec : records) {
        if (rec.direction != "forward") {
            continue;
        }
        if (rec.ratio == 4) {
            EXPECT_GE(rec.entry_ratio, prev4);
            prev4 = rec.entry_ratio;
        } else {
            EXPECT_GE(rec.entry_ratio, prev8);
            prev8 = rec.entry_ratio;
        }
    }
    // higher compression ratio gives a higher speed-up estimate at every length
    for (const int64_t t : grid) {
        double r4 = 0.0, r8 = 0.0;
        for (const BenchRecord& rec : records) {
            if (rec.raw_len == t && rec.direction == "forward") {
                (rec.ratio == 4 ? r4 : r8) = rec.entry_ratio;
            }
        }
        EXPECT_GT(r8, r4) << "T=" << t;
    }
}

TEST(Bench, HostTimingPathRuns) {
    // small sizes; checks the timing plumbing, not performance
    const CompressionConfig base = make_comp(4, 8, 2, 16);
    const auto records = bench({256}, {4}, base, /*repeats=*/1, /*heads=*/1, /*head_dim=*/8);
    ASSERT_EQ(records.size(), 2u);
    for (const BenchRecord& rec : records) {
        EXPECT_GT(rec.host_ms_sparse, 0.0);
        EXPECT_GT(rec.host_ms_dense, 0.0);
    }
}

TEST(Csv, BoundaryAndTraceSchemas) {
    BoundaryProfile profile;
    profile.mean_ce = {1.5, 2.5};
    profile.count = {10, 10};
    std::ostringstream b;
    write_boundary_csv(profile, b);
    EXPECT_EQ(b.str(), "rel_pos,mean_ce,count\n0,1.5,10\n1,2.5,10\n");

    std::ostringstream t;
    write_trace_csv({TraceRow{0, 0, 4, 2, 8}, TraceRow{0, 1, 4, 2, 8}}, t);
    EXPECT_EQ(t.str(), "step,layer,sinks,gists,raws\n0,0,4,2,8\n0,1,4,2,8\n");

    std::ostringstream a;
    write_attn_stats_csv({0.25, 0.5}, a);
    EXPECT_EQ(a.str(), "layer,cross_chunk_mass\n0,0.25\n1,0.5\n");
}
