// SPDX-License-Identifier: Apache-2.0

#include "gistlm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gistlm/errors.hpp"
#include "gistlm/tensor.hpp"

namespace gistlm {

namespace {

constexpr double kNormEps = 1e-6;

template <typename Real>
void rmsnorm_rows(const Real* x, const Real* w, Real* y, int64_t rows, int64_t n) {
    for (int64_t t = 0; t < rows; ++t) {
        const Real* xr = x + t * n;
        Real* yr = y + t * n;
        double ms = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            ms += static_cast<double>(xr[i]) * xr[i];
        }
        const Real inv = static_cast<Real>(1.0 / std::sqrt(ms / n + kNormEps));
        for (int64_t i = 0; i < n; ++i) {
            yr[i] = w[i] * xr[i] * inv;
        }
    }
}

template <typename Real>
void rope_rows(Real* qk, const std::vector<TokenSlot>& slots, int64_t heads, int64_t head_dim,
               double theta) {
    for (size_t t = 0; t < slots.size(); ++t) {
        rope_rotate_row(qk + static_cast<int64_t>(t) * heads * head_dim, heads, head_dim, theta,
                        slots[t].position_id);
    }
}

}  // namespace

template <typename Real>
void KVCache<Real>::push_meta(const EntryMeta& m) {
    meta_.push_back(m);
    if (m.kind == TokenKind::Sink) {
        ++sinks_;
    } else if (m.kind == TokenKind::Gist) {
        ++gists_;
    }
}

template <typename Real>
void KVCache<Real>::push_kv(int64_t layer, std::span<const Real> key_row,
                            std::span<const Real> value_row) {
    keys_[layer].insert(keys_[layer].end(), key_row.begin(), key_row.end());
    values_[layer].insert(values_[layer].end(), value_row.begin(), value_row.end());
}

template <typename Real>
int64_t KVCache<Real>::evict_raw_before(int64_t unit_lo) {
    std::vector<int64_t> keep;
    keep.reserve(meta_.size());
    for (size_t i = 0; i < meta_.size(); ++i) {
        if (meta_[i].kind != TokenKind::Raw || meta_[i].unit_id >= unit_lo) {
            keep.push_back(static_cast<int64_t>(i));
        }
    }
    const int64_t removed = entry_count() - static_cast<int64_t>(keep.size());
    if (removed == 0) {
        return 0;
    }
    std::vector<EntryMeta> new_meta;
    new_meta.reserve(keep.size());
    for (const int64_t i : keep) {
        new_meta.push_back(meta_[i]);
    }
    meta_ = std::move(new_meta);
    for (size_t l = 0; l < keys_.size(); ++l) {
        std::vector<Real> nk(keep.size() * embed_dim_), nv(keep.size() * embed_dim_);
        for (size_t o = 0; o < keep.size(); ++o) {
            const int64_t i = keep[o];
            std::copy(keys_[l].begin() + i * embed_dim_, keys_[l].begin() + (i + 1) * embed_dim_,
                      nk.begin() + static_cast<int64_t>(o) * embed_dim_);
            std::copy(values_[l].begin() + i * embed_dim_,
                      values_[l].begin() + (i + 1) * embed_dim_,
                      nv.begin() + static_cast<int64_t>(o) * embed_dim_);
        }
        keys_[l] = std::move(nk);
        values_[l] = std::move(nv);
    }
    return removed;
}

template <typename Real>
void evict(KVCache<Real>& cache, int64_t current_unit, const CompressionConfig& config) {
    cache.evict_raw_before(current_unit - config.window_units);
}

template <typename Real>
InferenceEngine<Real>::InferenceEngine(const Model<Real>& model)
    : model_(model),
      cache_(model.model_config().layers, model.model_config().embed_dim()) {}

template <typename Real>
void InferenceEngine<Real>::append_and_forward(const std::vector<TokenSlot>& slots,
                                               std::vector<Real>* all_logits) {
    const ModelConfig& mc = model_.model_config();
    const CompressionConfig& cc = model_.compression_config();
    const int64_t c = static_cast<int64_t>(slots.size());
    const int64_t e = mc.embed_dim();
    const int64_t h = mc.heads;
    const int64_t d = mc.head_dim;
    const int64_t vx = model_.extended_vocab();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(d));
    const Parameters<Real>& params = model_.params();

    const int64_t n0 = cache_.entry_count();
    for (const TokenSlot& slot : slots) {
        cache_.push_meta(typename KVCache<Real>::EntryMeta{slot.kind, slot.aug_index,
                                                           slot.unit_id, slot.position_id});
    }

    std::vector<Real> x(c * e);
    for (int64_t t = 0; t < c; ++t) {
        const TokenId id = slots[t].token_id;
        if (id < 0 || id >= vx) {
            throw IndexOutOfRange("token id " + std::to_string(id) +
                                  " outside the extended vocabulary");
        }
        std::copy(params.embedding.begin() + id * e, params.embedding.begin() + (id + 1) * e,
                  x.begin() + t * e);
    }

    std::vector<Real> normed(c * e), q(c * e), kx(c * e), vx_rows(c * e), attn(c * e),
        proj(c * e);
    for (int64_t l = 0; l < mc.layers; ++l) {
        const LayerParams<Real>& lp = params.layers[l];
        rmsnorm_rows(x.data(), lp.attn_norm.data(), normed.data(), c, e);
        matmul(normed.data(), lp.wq.data(), q.data(), c, e, e);
        matmul(normed.data(), lp.wk.data(), kx.data(), c, e, e);
        matmul(normed.data(), lp.wv.data(), vx_rows.data(), c, e, e);
        rope_rows(q.data(), slots, h, d, mc.rope_theta);
        rope_rows(kx.data(), slots, h, d, mc.rope_theta);
        for (int64_t t = 0; t < c; ++t) {
            cache_.push_kv(l, std::span<const Real>(kx.data() + t * e, e),
                           std::span<const Real>(vx_rows.data() + t * e, e));
        }

        const std::span<const Real> keys = cache_.keys(l);
        const std::span<const Real> values = cache_.values(l);
        const auto& meta = cache_.meta();
        std::vector<Real> scores;
        for (int64_t t = 0; t < c; ++t) {
            const int64_t limit = n0 + t + 1;  // causal bound over cache order
            const int64_t query_unit = slots[t].unit_id;
            scores.assign(limit, -std::numeric_limits<Real>::infinity());
            for (int64_t head = 0; head < h; ++head) {
                const Real* qrow = q.data() + (t * h + head) * d;
                Real max_score = -std::numeric_limits<Real>::infinity();
                for (int64_t j = 0; j < limit; ++j) {
                    const auto& em = meta[j];
                    const bool visible = em.kind != TokenKind::Raw ||
                                         em.unit_id >= query_unit - cc.window_units;
                    if (!visible) {
                        scores[j] = -std::numeric_limits<Real>::infinity();
                        continue;
                    }
                    const Real* krow = keys.data() + (j * h + 0) * d + head * d;
                    Real dot = Real(0);
                    for (int64_t i = 0; i < d; ++i) {
                        dot += qrow[i] * krow[i];
                    }
                    scores[j] = dot * scale;
                    max_score = std::max(max_score, scores[j]);
                }
                Real denom = Real(0);
                Real* arow = attn.data() + (t * h + head) * d;
                std::fill(arow, arow + d, Real(0));
                for (int64_t j = 0; j < limit; ++j) {
                    if (scores[j] == -std::numeric_limits<Real>::infinity()) {
                        continue;
                    }
                    const Real w = std::exp(scores[j] - max_score);
                    denom += w;
                    const Real* vrow = values.data() + j * e + head * d;
                    for (int64_t i = 0; i < d; ++i) {
                        arow[i] += w * vrow[i];
                    }
                }
                const Real inv = Real(1) / denom;
                for (int64_t i = 0; i < d; ++i) {
                    arow[i] *= inv;
                }
            }
        }

        matmul(attn.data(), lp.wo.data(), proj.data(), c, e, e);
        for (int64_t i = 0; i < c * e; ++i) {
            x[i] += proj[i];
        }

        const int64_t mdim = mc.hidden_dim();
        std::vector<Real> mn(c * e), gate(c * mdim), up(c * mdim), mlp_out(c * e);
        rmsnorm_rows(x.data(), lp.mlp_norm.data(), mn.data(), c, e);
        matmul(mn.data(), lp.w_gate.data(), gate.data(), c, e, mdim);
        matmul(mn.data(), lp.w_up.data(), up.data(), c, e, mdim);
        for (int64_t i = 0; i < c * mdim; ++i) {
            const double g = static_cast<double>(gate[i]);
            gate[i] = static_cast<Real>(g / (1.0 + std::exp(-g)) * up[i]);
        }
        matmul(gate.data(), lp.w_down.data(), mlp_out.data(), c, mdim, e);
        for (int64_t i = 0; i < c * e; ++i) {
            x[i] += mlp_out[i];
        }
    }

    if (all_logits != nullptr) {
        std::vector<Real> fn(c * e);
        rmsnorm_rows(x.data(), params.final_norm.data(), fn.data(), c, e);
        all_logits->assign(c * vx, Real(0));
        matmul(fn.data(), params.head.data(), all_logits->data(), c, e, vx);
    }
}

template <typename Real>
std::vector<Real> InferenceEngine<Real>::prefill(std::span<const TokenId> raw_tokens,
                                                 int64_t chunk_size) {
    const CompressionConfig& cc = model_.compression_config();
    const int64_t r = cc.ratio;
    const int64_t s = cc.sink_count;
    const int64_t total = static_cast<int64_t>(raw_tokens.size());
    if (prefilled_) {
        throw InconsistentState("prefill called twice on one session");
    }
    if (chunk_size <= 0 || chunk_size % r != 0) {
        throw InvalidChunkSize("chunk size must be a positive multiple of the ratio");
    }
    if (total <= 0 || total % r != 0) {
        throw NonDivisibleLength("prompt length must be a positive multiple of the ratio");
    }
    prefilled_ = true;

    const TokenId vocab = static_cast<TokenId>(model_.model_config().vocab);
    if (s > 0) {
        std::vector<TokenSlot> sink_slots;
        sink_slots.reserve(s);
        for (int64_t i = 0; i < s; ++i) {
            sink_slots.push_back(TokenSlot{TokenKind::Sink, i, -1, -1, i + 1,
                                           sink_token_id(vocab, i)});
        }
        append_and_forward(sink_slots, nullptr);
    }

    std::vector<Real> chunk_logits;
    std::vector<Real> last_logits;
    int64_t done = 0;
    while (done < total) {
        const int64_t take = std::min(chunk_size, total - done);
        std::vector<TokenSlot> slots;
        slots.reserve(take + take / r);
        int64_t last_raw_row = -1;
        for (int64_t i = 0; i < take; ++i) {
            const int64_t j = done + i;
            const int64_t unit = j / r;
            slots.push_back(TokenSlot{TokenKind::Raw, aug_index_of_raw(j, cc), j, unit,
                                      s + j + 1, raw_tokens[j]});
            last_raw_row = static_cast<int64_t>(slots.size()) - 1;
            if (j % r == r - 1) {
                slots.push_back(TokenSlot{TokenKind::Gist, aug_index_of_gist(unit, cc), -1, unit,
                                          position_id_of(aug_index_of_gist(unit, cc), cc),
                                          gist_token_id(vocab, cc)});
            }
        }
        append_and_forward(slots, &chunk_logits);
        done += take;
        state_.raw_count = done;
        state_.pending_in_unit = 0;
        state_.current_unit = done / r - 1;  // unit of the chunk's final gist
        state_.next_position_id = s + done + 1;
        evict(cache_, state_.current_unit, cc);
        check_memory_law();

        const int64_t vx = model_.extended_vocab();
        last_logits.assign(chunk_logits.begin() + last_raw_row * vx,
                           chunk_logits.begin() + (last_raw_row + 1) * vx);
    }
    return last_logits;
}

template <typename Real>
std::vector<Real> InferenceEngine<Real>::decode_step(TokenId token) {
    const CompressionConfig& cc = model_.compression_config();
    const int64_t r = cc.ratio;
    const int64_t s = cc.sink_count;
    if (!prefilled_) {
        throw InconsistentState("decode_step before prefill: the sink prefix must exist");
    }
    if (state_.pending_in_unit != state_.raw_count % r) {
        throw InconsistentState("decode state counters disagree");
    }

    const TokenId vocab = static_cast<TokenId>(model_.model_config().vocab);
    const int64_t j = state_.raw_count;
    const int64_t unit = j / r;
    if (unit > state_.current_unit) {
        // The window slides one unit forward; raw entries that just left it go now.
        evict(cache_, unit, cc);
    }

    std::vector<Real> logits;
    std::vector<TokenSlot> slot{TokenSlot{TokenKind::Raw, aug_index_of_raw(j, cc), j, unit,
                                          s + j + 1, token}};
    append_and_forward(slot, &logits);
    state_.raw_count = j + 1;
    state_.pending_in_unit = state_.raw_count % r;
    state_.current_unit = unit;
    state_.next_position_id = s + state_.raw_count + 1;

    if (state_.pending_in_unit == 0) {
        // Unit complete: run the gist slot for its KV only; logits discarded.
        std::vector<TokenSlot> gist{TokenSlot{TokenKind::Gist, aug_index_of_gist(unit, cc), -1,
                                              unit,
                                              position_id_of(aug_index_of_gist(unit, cc), cc),
                                              gist_token_id(vocab, cc)}};
        append_and_forward(gist, nullptr);
        evict(cache_, unit, cc);
    }
    check_memory_law();
    return logits;
}

template <typename Real>
int64_t InferenceEngine<Real>::expected_entry_count() const {
    const CompressionConfig& cc = model_.compression_config();
    const int64_t complete = state_.raw_count / cc.ratio;
    const int64_t pending = state_.raw_count % cc.ratio;
    const int64_t lowest_retained = std::max<int64_t>(0, state_.current_unit - cc.window_units);
    const int64_t retained_complete = std::max<int64_t>(0, complete - lowest_retained);
    return cc.sink_count + complete + retained_complete * cc.ratio + pending;
}

template <typename Real>
void InferenceEngine<Real>::check_memory_law() const {
    const CompressionConfig& cc = model_.compression_config();
    if (cache_.entry_count() != expected_entry_count()) {
        throw InconsistentState("cache entry count " + std::to_string(cache_.entry_count()) +
                                " deviates from the closed form " +
                                std::to_string(expected_entry_count()));
    }
    const int64_t t = state_.raw_count;
    const int64_t bound = cc.sink_count + (t + cc.ratio - 1) / cc.ratio +
                          (cc.window_units + 1) * cc.ratio;
    if (cache_.entry_count() > bound) {
        throw InconsistentState("cache exceeded its eviction bound");
    }
}

template <typename Real>
TokenId greedy_base_token(std::span<const Real> logits_row, int64_t vocab) {
    TokenId best = 0;
    Real best_val = logits_row[0];
    for (int64_t i = 1; i < vocab; ++i) {
        if (logits_row[i] > best_val) {
            best_val = logits_row[i];
            best = static_cast<TokenId>(i);
        }
    }
    return best;
}

template class KVCache<float>;
template class KVCache<double>;
template void evict(KVCache<float>&, int64_t, const CompressionConfig&);
template void evict(KVCache<double>&, int64_t, const CompressionConfig&);
template class InferenceEngine<float>;
template class InferenceEngine<double>;
template TokenId greedy_base_token(std::span<const float>, int64_t);
template TokenId greedy_base_token(std::span<const double>, int64_t);

}  // namespace gistlm
