// SPDX-License-Identifier: Apache-2.0

#include "gistlm/tasks.hpp"

#include <algorithm>
#include <random>
#include <string>

#include "gistlm/errors.hpp"

namespace gistlm {

KvRecallVocab kv_recall_vocab(int64_t vocab) {
    if (vocab < 8) {
        throw ConfigError("kv_recall needs a vocabulary of at least 8 tokens");
    }
    KvRecallVocab v;
    v.filler = 0;
    v.query_marker = 1;
    const int64_t symbols = std::min<int64_t>(16, (vocab - 2) / 2);
    v.key_base = 2;
    v.key_count = symbols;
    v.value_base = static_cast<TokenId>(2 + symbols);
    v.value_count = symbols;
    return v;
}

namespace {

TaskInstance gen_kv_recall(const SynthTaskSpec& spec, std::mt19937_64& rng) {
    const int64_t t = spec.seq_len;
    if (t < 5 + spec.needle_distance) {
        throw ConfigError("kv_recall sequence too short for needle_distance " +
                          std::to_string(spec.needle_distance));
    }
    const KvRecallVocab v = kv_recall_vocab(spec.vocab);
    std::uniform_int_distribution<int64_t> key_dist(0, v.key_count - 1);
    std::uniform_int_distribution<int64_t> value_dist(0, v.value_count - 1);

    TaskInstance inst;
    inst.tokens.assign(t, v.filler);
    const TokenId key = static_cast<TokenId>(v.key_base + key_dist(rng));
    const TokenId value = static_cast<TokenId>(v.value_base + value_dist(rng));

    // fact ... [needle_distance fillers] ... Q key value
    const int64_t fact_pos = t - 5 - spec.needle_distance;
    inst.tokens[fact_pos] = key;
    inst.tokens[fact_pos + 1] = value;
    inst.tokens[t - 3] = v.query_marker;
    inst.tokens[t - 2] = key;
    inst.tokens[t - 1] = value;
    inst.eval_positions.push_back(t - 1);
    return inst;
}

TaskInstance gen_copy(const SynthTaskSpec& spec, std::mt19937_64& rng) {
    const int64_t t = spec.seq_len;
    if (t < 2 || t % 2 != 0) {
        throw ConfigError("copy task needs an even sequence length");
    }
    std::uniform_int_distribution<int64_t> tok(0, spec.vocab - 1);
    TaskInstance inst;
    inst.tokens.resize(t);
    for (int64_t i = 0; i < t / 2; ++i) {
        inst.tokens[i] = static_cast<TokenId>(tok(rng));
        inst.tokens[t / 2 + i] = inst.tokens[i];
    }
    for (int64_t i = t / 2; i < t; ++i) {
        inst.eval_positions.push_back(i);
    }
    return inst;
}

// Noisy periodic motif stream. The motif content is fresh per sequence, so
// prediction requires in-context retrieval from one period back; the period
// itself is fixed at T/32 so that retrieval distance is stable across
// sequences (it always exceeds any small local window).
TaskInstance gen_char_lm(const SynthTaskSpec& spec, std::mt19937_64& rng) {
    const int64_t t = spec.seq_len;
    if (t < 8) {
        throw ConfigError("char_lm needs at least 8 tokens");
    }
    const int64_t period = std::max<int64_t>(4, t / 32);
    std::uniform_int_distribution<int64_t> tok(0, spec.vocab - 1);
    std::uniform_real_distribution<double> noise(0.0, 1.0);

    std::vector<TokenId> motif(period);
    for (TokenId& m : motif) {
        m = static_cast<TokenId>(tok(rng));
    }
    TaskInstance inst;
    inst.tokens.resize(t);
    for (int64_t i = 0; i < t; ++i) {
        inst.tokens[i] = noise(rng) < 0.02 ? static_cast<TokenId>(tok(rng))
                                           : motif[i % period];
    }
    return inst;
}

}  // namespace

std::vector<TaskInstance> gen_task(const SynthTaskSpec& spec, int64_t count) {
    if (spec.vocab < 2 || spec.seq_len < 1 || count < 0) {
        throw ConfigError("invalid task spec");
    }
    std::mt19937_64 rng(spec.seed);
    std::vector<TaskInstance> out;
    out.reserve(count);
    for (int64_t i = 0; i < count; ++i) {
        switch (spec.kind) {
            case TaskKind::KvRecall:
                out.push_back(gen_kv_recall(spec, rng));
                break;
            case TaskKind::Copy:
                out.push_back(gen_copy(spec, rng));
                break;
            case TaskKind::CharLm:
                out.push_back(gen_char_lm(spec, rng));
                break;
        }
    }
    return out;
}

}  // namespace gistlm
