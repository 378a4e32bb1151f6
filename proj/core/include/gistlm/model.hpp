// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gistlm/attention.hpp"
#include "gistlm/config.hpp"
#include "gistlm/gist_shift.hpp"
#include "gistlm/layout.hpp"
#include "gistlm/visibility.hpp"

namespace gistlm {

/// Decoder-only pre-norm transformer at toy scale: RMS normalization, rotary
/// positions fed by the layout's aligned position ids, gated MLP. The
/// embedding table covers the base vocabulary plus sink_count distinct sink
/// embeddings plus one shared gist embedding.
struct ModelConfig {
    int64_t layers = 2;
    int64_t heads = 4;
    int64_t head_dim = 32;
    int64_t hidden_mult = 2;
    int64_t vocab = 64;  // base vocabulary, before reserved ids
    double rope_theta = 10000.0;
    uint64_t seed = 0;

    int64_t embed_dim() const { return heads * head_dim; }
    int64_t hidden_dim() const { return hidden_mult * embed_dim(); }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

template <typename Real>
struct LayerParams {
    std::vector<Real> attn_norm;  // [E]
    std::vector<Real> wq, wk, wv, wo;  // [E, E]
    std::vector<Real> mlp_norm;   // [E]
    std::vector<Real> w_gate, w_up;  // [E, M]
    std::vector<Real> w_down;        // [M, E]
};

template <typename Real>
struct Parameters {
    std::vector<Real> embedding;  // [vocab + sinks + 1, E]
    std::vector<LayerParams<Real>> layers;
    std::vector<Real> final_norm;  // [E]
    std::vector<Real> head;        // [E, vocab + sinks + 1]
};

/// Flat view over every parameter tensor, used by the optimizer and the
/// checkpoint writer. Order is stable.
template <typename Real>
struct NamedTensorRef {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<Real>* data;
};

template <typename Real>
std::vector<NamedTensorRef<Real>> named_tensors(Parameters<Real>& params);

enum class AttentionMode { Oracle, Sparse };

/// Rotates one row of head-major [heads, head_dim] features by the rotary
/// angle of position_id; the inverse applies the transposed rotation. The
/// score between two rotated rows depends only on their position difference.
template <typename Real>
void rope_rotate_row(Real* row, int64_t heads, int64_t head_dim, double theta,
                     int64_t position_id, bool inverse = false);

/// Which visibility rule a model was trained under.
enum class TrainPattern { Unified, ChunkBaseline };

struct LossReport {
    double mean_ce = 0.0;                 // nats, over contributing positions
    int64_t predicting_positions = 0;
    std::vector<double> per_position_ce;  // aligned to raw indices, length T
    double grad_norm = 0.0;               // filled by train steps
};

/// Per-layer activations a backward pass needs. Sparse-mode tensors are kept
/// in shifted padded order next to the permutation that produced them.
template <typename Real>
struct ForwardTrace {
    AugmentedSequence seq;
    bool sparse = false;
    DenseMask mask;          // oracle mode
    BlockLayout layout;      // sparse mode
    ShiftPermutation shift;  // sparse mode

    struct Layer {
        std::vector<Real> x_in, attn_normed;
        std::vector<Real> q, k, v;  // post-rope; shifted order in sparse mode
        AttentionOutput<Real> attn;
        std::vector<Real> attn_out;  // original order [T', E]
        std::vector<Real> x_mid, mlp_normed, gate, up, act;
    };
    std::vector<Layer> layers;
    std::vector<Real> x_final, final_normed;
    std::vector<Real> logits;  // [T', vocab + sinks + 1]
};

template <typename Real>
class Model {
public:
    Model(const ModelConfig& model_cfg, const CompressionConfig& comp_cfg);

    const ModelConfig& model_config() const { return model_cfg_; }
    const CompressionConfig& compression_config() const { return comp_cfg_; }
    int64_t extended_vocab() const { return model_cfg_.vocab + comp_cfg_.sink_count + 1; }

    Parameters<Real>& params() { return params_; }
    const Parameters<Real>& params() const { return params_; }

    /// Logits [seq.size(), extended_vocab]; Oracle runs the dense unified
    /// mask, Sparse runs the gist-shift block kernel.
    std::vector<Real> forward(const AugmentedSequence& seq, AttentionMode mode) const;
    std::vector<Real> forward_with_mask(const AugmentedSequence& seq, const DenseMask& mask) const;

    ForwardTrace<Real> forward_trace(const AugmentedSequence& seq, AttentionMode mode) const;
    ForwardTrace<Real> forward_trace_with_mask(const AugmentedSequence& seq, DenseMask mask) const;

    /// Cross-entropy over raw tokens only: the slot immediately preceding
    /// each raw slot carries that token's loss; gist and sink targets never
    /// contribute.
    LossReport lm_loss(const std::vector<Real>& logits, const AugmentedSequence& seq) const;

    /// d(mean_ce)/d(logits), scaled by grad_scale (1/batch for batch means).
    std::vector<Real> loss_backward(const std::vector<Real>& logits, const AugmentedSequence& seq,
                                    double grad_scale) const;

    /// Accumulates gradients of the traced forward into `grads`.
    void backward(const ForwardTrace<Real>& trace, const std::vector<Real>& dlogits,
                  Parameters<Real>& grads) const;

    Parameters<Real> zero_grads() const;

private:
    void init_params();
    void apply_rope(std::vector<Real>& qk, const AugmentedSequence& seq, bool inverse) const;
    ForwardTrace<Real> run_forward(const AugmentedSequence& seq, bool sparse,
                                   DenseMask mask) const;

    ModelConfig model_cfg_;
    CompressionConfig comp_cfg_;
    Parameters<Real> params_;
};

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t warmup_steps = 20;   // linear warmup from 0
    int64_t total_steps = 200;   // cosine decay horizon
    double final_lr_fraction = 0.5;
};

/// Adam with decoupled weight decay; moments kept in double for either
/// parameter precision. Linear warmup then cosine decay to a fraction of
/// the peak learning rate.
template <typename Real>
class AdamW {
public:
    AdamW(Parameters<Real>& params, OptimizerConfig cfg);

    double lr_at(int64_t step) const;
    /// Applies one update from the accumulated gradients; returns the lr used.
    double step(Parameters<Real>& params, Parameters<Real>& grads);
    int64_t steps_done() const { return step_; }

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t step_ = 0;
};

struct TrainConfig {
    OptimizerConfig optimizer;
    TrainPattern pattern = TrainPattern::Unified;
    int64_t chunk_len = 0;  // ChunkBaseline only
    AttentionMode mode = AttentionMode::Sparse;
};

/// One-pass training driver: forward, raw-token cross-entropy, backward,
/// gradient norm, optimizer update. The chunk-baseline pattern runs through
/// the dense oracle (its mask is not a gist-shift layout).
template <typename Real>
class Trainer {
public:
    Trainer(Model<Real>& model, TrainConfig cfg);

    LossReport step(const std::vector<std::vector<TokenId>>& batch);
    int64_t steps_done() const { return optimizer_.steps_done(); }
    const TrainConfig& config() const { return cfg_; }

    /// Builds the augmented sequence this trainer's pattern prescribes.
    AugmentedSequence make_sequence(std::span<const TokenId> raw_tokens) const;

private:
    Model<Real>& model_;
    TrainConfig cfg_;
    AdamW<Real> optimizer_;
};

struct BoundaryProfile {
    std::vector<double> mean_ce;  // length chunk_len, indexed by raw pos % chunk_len
    std::vector<int64_t> count;
};

/// Mean CE bucketed by raw position within eval chunks of length chunk_len,
/// excluding the first chunk. The model is evaluated under its own training
/// pattern.
template <typename Real>
BoundaryProfile boundary_loss_profile(const Model<Real>& model,
                                      const std::vector<std::vector<TokenId>>& data,
                                      int64_t chunk_len, TrainPattern pattern,
                                      int64_t train_chunk_len = 0);

}  // namespace gistlm
