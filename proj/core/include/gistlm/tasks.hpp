// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "gistlm/layout.hpp"

namespace gistlm {

enum class TaskKind { KvRecall, Copy, CharLm };

/// Deterministic synthetic-task generator settings. kv_recall plants one
/// (key, value) fact and ends with a query whose answer is the value;
/// needle_distance counts the filler tokens between the fact and the query
/// marker. copy repeats the first half; char_lm emits noisy periodic motifs
/// whose period forces retrieval across chunk-sized spans.
struct SynthTaskSpec {
    TaskKind kind = TaskKind::CharLm;
    int64_t vocab = 64;
    int64_t seq_len = 512;
    int64_t needle_distance = 0;
    uint64_t seed = 0;
};

struct TaskInstance {
    std::vector<TokenId> tokens;
    std::vector<int64_t> eval_positions;  // raw positions scored for exact match
};

std::vector<TaskInstance> gen_task(const SynthTaskSpec& spec, int64_t count);

/// Token-role layout of the kv_recall vocabulary.
struct KvRecallVocab {
    TokenId filler;
    TokenId query_marker;
    TokenId key_base;
    int64_t key_count;
    TokenId value_base;
    int64_t value_count;  // the answer vocabulary; chance accuracy is 1/value_count
};

KvRecallVocab kv_recall_vocab(int64_t vocab);

}  // namespace gistlm
