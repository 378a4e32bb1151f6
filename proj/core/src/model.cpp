// SPDX-License-Identifier: Apache-2.0

#include "gistlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "gistlm/errors.hpp"
#include "gistlm/tensor.hpp"

namespace gistlm {

namespace {

constexpr double kNormEps = 1e-6;

template <typename Real>
void rmsnorm_forward(const Real* x, const Real* w, Real* y, int64_t rows, int64_t n) {
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

// dx += backward of y = w * x / rms(x); dw accumulates across rows.
template <typename Real>
void rmsnorm_backward(const Real* x, const Real* w, const Real* g, Real* dx, Real* dw,
                      int64_t rows, int64_t n) {
    for (int64_t t = 0; t < rows; ++t) {
        const Real* xr = x + t * n;
        const Real* gr = g + t * n;
        Real* dxr = dx + t * n;
        double ms = 0.0;
        double gwx = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            ms += static_cast<double>(xr[i]) * xr[i];
            gwx += static_cast<double>(gr[i]) * w[i] * xr[i];
        }
        const double rho2 = ms / n + kNormEps;
        const double inv = 1.0 / std::sqrt(rho2);
        const double coef = gwx * inv / (rho2 * n);
        for (int64_t i = 0; i < n; ++i) {
            dxr[i] += static_cast<Real>(gr[i] * w[i] * inv - xr[i] * coef);
            dw[i] += static_cast<Real>(gr[i] * xr[i] * inv);
        }
    }
}

template <typename Real>
std::vector<Real> permute_rows(const std::vector<Real>& x, const std::vector<int64_t>& perm,
                               int64_t row_elems) {
    std::vector<Real> out(perm.size() * row_elems, Real(0));
    for (size_t p = 0; p < perm.size(); ++p) {
        if (perm[p] >= 0) {
            std::copy(x.begin() + perm[p] * row_elems, x.begin() + (perm[p] + 1) * row_elems,
                      out.begin() + p * row_elems);
        }
    }
    return out;
}

template <typename Real>
std::vector<Real> unpermute_rows(const std::vector<Real>& shifted,
                                 const std::vector<int64_t>& perm, int64_t orig_rows,
                                 int64_t row_elems) {
    std::vector<Real> out(orig_rows * row_elems, Real(0));
    for (size_t p = 0; p < perm.size(); ++p) {
        if (perm[p] >= 0) {
            std::copy(shifted.begin() + p * row_elems, shifted.begin() + (p + 1) * row_elems,
                      out.begin() + perm[p] * row_elems);
        }
    }
    return out;
}

template <typename Real>
double silu(Real g) {
    const double gd = g;
    return gd / (1.0 + std::exp(-gd));
}

template <typename Real>
double silu_grad(Real g) {
    const double gd = g;
    const double sig = 1.0 / (1.0 + std::exp(-gd));
    return sig * (1.0 + gd * (1.0 - sig));
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 0 || heads < 1 || head_dim < 1 || hidden_mult < 1 || vocab < 1) {
        throw ConfigError("model dimensions must be positive (layers may be zero)");
    }
    if (rope_theta <= 0.0) {
        throw ConfigError("rope_theta must be positive");
    }
}

template <typename Real>
std::vector<NamedTensorRef<Real>> named_tensors(Parameters<Real>& params) {
    std::vector<NamedTensorRef<Real>> refs;
    const auto push = [&refs](std::string name, std::vector<int64_t> shape,
                              std::vector<Real>* data) {
        refs.push_back(NamedTensorRef<Real>{std::move(name), std::move(shape), data});
    };
    const int64_t e = params.layers.empty()
                          ? 0
                          : static_cast<int64_t>(params.layers[0].attn_norm.size());
    const int64_t vx = e > 0 ? static_cast<int64_t>(params.embedding.size()) / e
                             : static_cast<int64_t>(params.embedding.size());
    const int64_t e2 = e > 0 ? e : static_cast<int64_t>(params.final_norm.size());
    const int64_t vx2 = e2 > 0 ? static_cast<int64_t>(params.embedding.size()) / e2 : vx;
    push("embedding", {vx2, e2}, &params.embedding);
    for (size_t l = 0; l < params.layers.size(); ++l) {
        LayerParams<Real>& lp = params.layers[l];
        const std::string prefix = "layers." + std::to_string(l) + ".";
        const int64_t m = static_cast<int64_t>(lp.w_gate.size()) / e2;
        push(prefix + "attn_norm", {e2}, &lp.attn_norm);
        push(prefix + "wq", {e2, e2}, &lp.wq);
        push(prefix + "wk", {e2, e2}, &lp.wk);
        push(prefix + "wv", {e2, e2}, &lp.wv);
        push(prefix + "wo", {e2, e2}, &lp.wo);
        push(prefix + "mlp_norm", {e2}, &lp.mlp_norm);
        push(prefix + "w_gate", {e2, m}, &lp.w_gate);
        push(prefix + "w_up", {e2, m}, &lp.w_up);
        push(prefix + "w_down", {m, e2}, &lp.w_down);
    }
    push("final_norm", {e2}, &params.final_norm);
    push("head", {e2, static_cast<int64_t>(params.head.size()) / e2}, &params.head);
    return refs;
}

template <typename Real>
Model<Real>::Model(const ModelConfig& model_cfg, const CompressionConfig& comp_cfg)
    : model_cfg_(model_cfg), comp_cfg_(comp_cfg) {
    model_cfg_.validate();
    comp_cfg_.validate();
    init_params();
}

template <typename Real>
void Model<Real>::init_params() {
    const int64_t e = model_cfg_.embed_dim();
    const int64_t m = model_cfg_.hidden_dim();
    const int64_t vx = extended_vocab();
    std::mt19937_64 rng(model_cfg_.seed);

    const double base_std = 0.02;
    const double out_std = 0.02 / std::sqrt(2.0 * std::max<int64_t>(1, model_cfg_.layers));

    params_.embedding.resize(vx * e);
    fill_normal(params_.embedding, rng, base_std);
    params_.layers.resize(model_cfg_.layers);
    for (LayerParams<Real>& lp : params_.layers) {
        lp.attn_norm.assign(e, Real(1));
        lp.wq.resize(e * e);
        lp.wk.resize(e * e);
        lp.wv.resize(e * e);
        lp.wo.resize(e * e);
        fill_normal(lp.wq, rng, base_std);
        fill_normal(lp.wk, rng, base_std);
        fill_normal(lp.wv, rng, base_std);
        fill_normal(lp.wo, rng, out_std);
        lp.mlp_norm.assign(e, Real(1));
        lp.w_gate.resize(e * m);
        lp.w_up.resize(e * m);
        lp.w_down.resize(m * e);
        fill_normal(lp.w_gate, rng, base_std);
        fill_normal(lp.w_up, rng, base_std);
        fill_normal(lp.w_down, rng, out_std);
    }
    params_.final_norm.assign(e, Real(1));
    params_.head.resize(e * vx);
    fill_normal(params_.head, rng, base_std);
}

template <typename Real>
Parameters<Real> Model<Real>::zero_grads() const {
    Parameters<Real> grads;
    grads.embedding.assign(params_.embedding.size(), Real(0));
    grads.layers.resize(params_.layers.size());
    for (size_t l = 0; l < params_.layers.size(); ++l) {
        const LayerParams<Real>& lp = params_.layers[l];
        LayerParams<Real>& gp = grads.layers[l];
        gp.attn_norm.assign(lp.attn_norm.size(), Real(0));
        gp.wq.assign(lp.wq.size(), Real(0));
        gp.wk.assign(lp.wk.size(), Real(0));
        gp.wv.assign(lp.wv.size(), Real(0));
        gp.wo.assign(lp.wo.size(), Real(0));
        gp.mlp_norm.assign(lp.mlp_norm.size(), Real(0));
        gp.w_gate.assign(lp.w_gate.size(), Real(0));
        gp.w_up.assign(lp.w_up.size(), Real(0));
        gp.w_down.assign(lp.w_down.size(), Real(0));
    }
    grads.final_norm.assign(params_.final_norm.size(), Real(0));
    grads.head.assign(params_.head.size(), Real(0));
    return grads;
}

template <typename Real>
void rope_rotate_row(Real* row, int64_t heads, int64_t head_dim, double theta,
                     int64_t position_id, bool inverse) {
    const int64_t half = head_dim / 2;
    const double pos = static_cast<double>(position_id);
    for (int64_t head = 0; head < heads; ++head) {
        Real* slice = row + head * head_dim;
        for (int64_t i = 0; i < half; ++i) {
            const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / head_dim);
            const double angle = pos * freq;
            const double c = std::cos(angle);
            const double s = inverse ? -std::sin(angle) : std::sin(angle);
            const Real a = slice[i];
            const Real b = slice[i + half];
            slice[i] = static_cast<Real>(a * c - b * s);
            slice[i + half] = static_cast<Real>(a * s + b * c);
        }
    }
}

template <typename Real>
void Model<Real>::apply_rope(std::vector<Real>& qk, const AugmentedSequence& seq,
                             bool inverse) const {
    const int64_t e = model_cfg_.embed_dim();
    for (int64_t t = 0; t < seq.size(); ++t) {
        rope_rotate_row(qk.data() + t * e, model_cfg_.heads, model_cfg_.head_dim,
                        model_cfg_.rope_theta, seq.slots[t].position_id, inverse);
    }
}

template <typename Real>
ForwardTrace<Real> Model<Real>::run_forward(const AugmentedSequence& seq, bool sparse,
                                            DenseMask mask) const {
    const int64_t n = seq.size();
    const int64_t e = model_cfg_.embed_dim();
    const int64_t m = model_cfg_.hidden_dim();
    const int64_t vx = extended_vocab();

    ForwardTrace<Real> trace;
    trace.seq = seq;
    trace.sparse = sparse;
    if (sparse) {
        if (!(seq.config == comp_cfg_)) {
            throw LayoutMismatch("sequence config does not match the model's compression config");
        }
        trace.layout = BlockLayout::unified(seq.raw_len, comp_cfg_);
        trace.shift = gist_shift(seq, comp_cfg_.block_size);
        if (trace.layout.index_array() != trace.shift.perm) {
            throw LayoutMismatch("gist shift disagrees with the closed-form block layout");
        }
    } else {
        if (mask.rows() != n || mask.cols() != n) {
            throw ShapeMismatch("mask does not match sequence length");
        }
        trace.mask = std::move(mask);
    }

    std::vector<Real> x(n * e);
    for (int64_t t = 0; t < n; ++t) {
        const TokenId id = seq.slots[t].token_id;
        if (id < 0 || id >= vx) {
            throw IndexOutOfRange("token id " + std::to_string(id) +
                                  " outside the extended vocabulary");
        }
        std::copy(params_.embedding.begin() + id * e, params_.embedding.begin() + (id + 1) * e,
                  x.begin() + t * e);
    }

    trace.layers.resize(params_.layers.size());
    for (size_t l = 0; l < params_.layers.size(); ++l) {
        const LayerParams<Real>& lp = params_.layers[l];
        auto& lt = trace.layers[l];
        lt.x_in = x;

        lt.attn_normed.resize(n * e);
        rmsnorm_forward(lt.x_in.data(), lp.attn_norm.data(), lt.attn_normed.data(), n, e);

        std::vector<Real> q(n * e), k(n * e), v(n * e);
        matmul(lt.attn_normed.data(), lp.wq.data(), q.data(), n, e, e);
        matmul(lt.attn_normed.data(), lp.wk.data(), k.data(), n, e, e);
        matmul(lt.attn_normed.data(), lp.wv.data(), v.data(), n, e, e);
        apply_rope(q, seq, /*inverse=*/false);
        apply_rope(k, seq, /*inverse=*/false);

        if (sparse) {
            lt.q = permute_rows(q, trace.shift.perm, e);
            lt.k = permute_rows(k, trace.shift.perm, e);
            lt.v = permute_rows(v, trace.shift.perm, e);
            lt.attn = sparse_forward(std::span<const Real>(lt.q), std::span<const Real>(lt.k),
                                     std::span<const Real>(lt.v), model_cfg_.heads,
                                     model_cfg_.head_dim, trace.layout);
            lt.attn_out = unpermute_rows(lt.attn.out, trace.shift.perm, n, e);
        } else {
            lt.q = std::move(q);
            lt.k = std::move(k);
            lt.v = std::move(v);
            lt.attn = dense_masked_attention(std::span<const Real>(lt.q),
                                             std::span<const Real>(lt.k),
                                             std::span<const Real>(lt.v), model_cfg_.heads,
                                             model_cfg_.head_dim, trace.mask);
            lt.attn_out = lt.attn.out;
        }

        lt.x_mid.resize(n * e);
        std::vector<Real> proj(n * e);
        matmul(lt.attn_out.data(), lp.wo.data(), proj.data(), n, e, e);
        for (int64_t i = 0; i < n * e; ++i) {
            lt.x_mid[i] = lt.x_in[i] + proj[i];
        }

        lt.mlp_normed.resize(n * e);
        rmsnorm_forward(lt.x_mid.data(), lp.mlp_norm.data(), lt.mlp_normed.data(), n, e);
        lt.gate.resize(n * m);
        lt.up.resize(n * m);
        matmul(lt.mlp_normed.data(), lp.w_gate.data(), lt.gate.data(), n, e, m);
        matmul(lt.mlp_normed.data(), lp.w_up.data(), lt.up.data(), n, e, m);
        lt.act.resize(n * m);
        for (int64_t i = 0; i < n * m; ++i) {
            lt.act[i] = static_cast<Real>(silu(lt.gate[i]) * lt.up[i]);
        }
        std::vector<Real> mlp_out(n * e);
        matmul(lt.act.data(), lp.w_down.data(), mlp_out.data(), n, m, e);
        x.resize(n * e);
        for (int64_t i = 0; i < n * e; ++i) {
            x[i] = lt.x_mid[i] + mlp_out[i];
        }
    }

    trace.x_final = x;
    trace.final_normed.resize(n * e);
    rmsnorm_forward(trace.x_final.data(), params_.final_norm.data(), trace.final_normed.data(), n,
                    e);
    trace.logits.resize(n * vx);
    matmul(trace.final_normed.data(), params_.head.data(), trace.logits.data(), n, e, vx);
    return trace;
}

template <typename Real>
ForwardTrace<Real> Model<Real>::forward_trace(const AugmentedSequence& seq,
                                              AttentionMode mode) const {
    if (mode == AttentionMode::Sparse) {
        return run_forward(seq, /*sparse=*/true, DenseMask());
    }
    return run_forward(seq, /*sparse=*/false, build_unified_mask(seq));
}

template <typename Real>
ForwardTrace<Real> Model<Real>::forward_trace_with_mask(const AugmentedSequence& seq,
                                                        DenseMask mask) const {
    return run_forward(seq, /*sparse=*/false, std::move(mask));
}

template <typename Real>
std::vector<Real> Model<Real>::forward(const AugmentedSequence& seq, AttentionMode mode) const {
    return forward_trace(seq, mode).logits;
}

template <typename Real>
std::vector<Real> Model<Real>::forward_with_mask(const AugmentedSequence& seq,
                                                 const DenseMask& mask) const {
    return run_forward(seq, /*sparse=*/false, mask).logits;
}

template <typename Real>
LossReport Model<Real>::lm_loss(const std::vector<Real>& logits,
                                const AugmentedSequence& seq) const {
    const int64_t n = seq.size();
    const int64_t vx = extended_vocab();
    if (logits.size() != static_cast<size_t>(n * vx)) {
        throw ShapeMismatch("logits shape does not match sequence");
    }
    LossReport report;
    report.per_position_ce.assign(seq.raw_len, 0.0);
    double total = 0.0;
    for (int64_t t = 1; t < n; ++t) {
        const TokenSlot& slot = seq.slots[t];
        if (slot.kind != TokenKind::Raw) {
            continue;
        }
        const Real* row = logits.data() + (t - 1) * vx;
        double max_logit = -std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < vx; ++i) {
            max_logit = std::max(max_logit, static_cast<double>(row[i]));
        }
        double denom = 0.0;
        for (int64_t i = 0; i < vx; ++i) {
            denom += std::exp(static_cast<double>(row[i]) - max_logit);
        }
        const double ce =
            max_logit + std::log(denom) - static_cast<double>(row[slot.token_id]);
        report.per_position_ce[slot.raw_index] = ce;
        total += ce;
        ++report.predicting_positions;
    }
    report.mean_ce = report.predicting_positions > 0
                         ? total / static_cast<double>(report.predicting_positions)
                         : 0.0;
    return report;
}

template <typename Real>
std::vector<Real> Model<Real>::loss_backward(const std::vector<Real>& logits,
                                             const AugmentedSequence& seq,
                                             double grad_scale) const {
    const int64_t n = seq.size();
    const int64_t vx = extended_vocab();
    if (logits.size() != static_cast<size_t>(n * vx)) {
        throw ShapeMismatch("logits shape does not match sequence");
    }
    int64_t positions = 0;
    for (int64_t t = 1; t < n; ++t) {
        if (seq.slots[t].kind == TokenKind::Raw) {
            ++positions;
        }
    }
    std::vector<Real> dlogits(n * vx, Real(0));
    if (positions == 0) {
        return dlogits;
    }
    const double scale = grad_scale / static_cast<double>(positions);
    for (int64_t t = 1; t < n; ++t) {
        const TokenSlot& slot = seq.slots[t];
        if (slot.kind != TokenKind::Raw) {
            continue;
        }
        const Real* row = logits.data() + (t - 1) * vx;
        Real* drow = dlogits.data() + (t - 1) * vx;
        double max_logit = -std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < vx; ++i) {
            max_logit = std::max(max_logit, static_cast<double>(row[i]));
        }
        double denom = 0.0;
        for (int64_t i = 0; i < vx; ++i) {
            denom += std::exp(static_cast<double>(row[i]) - max_logit);
        }
        for (int64_t i = 0; i < vx; ++i) {
            const double p = std::exp(static_cast<double>(row[i]) - max_logit) / denom;
            const double target = i == slot.token_id ? 1.0 : 0.0;
            drow[i] += static_cast<Real>((p - target) * scale);
        }
    }
    return dlogits;
}

template <typename Real>
void Model<Real>::backward(const ForwardTrace<Real>& trace, const std::vector<Real>& dlogits,
                           Parameters<Real>& grads) const {
    const AugmentedSequence& seq = trace.seq;
    const int64_t n = seq.size();
    const int64_t e = model_cfg_.embed_dim();
    const int64_t m = model_cfg_.hidden_dim();
    const int64_t vx = extended_vocab();
    if (dlogits.size() != static_cast<size_t>(n * vx)) {
        throw ShapeMismatch("dlogits shape does not match sequence");
    }

    // head and final norm
    matmul_tn(trace.final_normed.data(), dlogits.data(), grads.head.data(), n, e, vx,
              /*accumulate=*/true);
    std::vector<Real> dfn(n * e);
    matmul_nt(dlogits.data(), params_.head.data(), dfn.data(), n, vx, e);
    std::vector<Real> dx(n * e, Real(0));
    rmsnorm_backward(trace.x_final.data(), params_.final_norm.data(), dfn.data(), dx.data(),
                     grads.final_norm.data(), n, e);

    for (int64_t l = static_cast<int64_t>(params_.layers.size()) - 1; l >= 0; --l) {
        const LayerParams<Real>& lp = params_.layers[l];
        LayerParams<Real>& gp = grads.layers[l];
        const auto& lt = trace.layers[l];

        // MLP block: x = x_mid + act * w_down
        std::vector<Real> dact(n * m);
        matmul_nt(dx.data(), lp.w_down.data(), dact.data(), n, e, m);
        matmul_tn(lt.act.data(), dx.data(), gp.w_down.data(), n, m, e, /*accumulate=*/true);
        std::vector<Real> dgate(n * m), dup(n * m);
        for (int64_t i = 0; i < n * m; ++i) {
            const double s = silu(lt.gate[i]);
            dgate[i] = static_cast<Real>(dact[i] * lt.up[i] * silu_grad(lt.gate[i]));
            dup[i] = static_cast<Real>(dact[i] * s);
        }
        std::vector<Real> dmlp_normed(n * e);
        matmul_nt(dgate.data(), lp.w_gate.data(), dmlp_normed.data(), n, m, e);
        matmul_nt(dup.data(), lp.w_up.data(), dmlp_normed.data(), n, m, e, /*accumulate=*/true);
        matmul_tn(lt.mlp_normed.data(), dgate.data(), gp.w_gate.data(), n, e, m,
                  /*accumulate=*/true);
        matmul_tn(lt.mlp_normed.data(), dup.data(), gp.w_up.data(), n, e, m, /*accumulate=*/true);

        // dx currently holds d(x_out); residual passes it to x_mid directly.
        std::vector<Real> dx_mid = dx;
        rmsnorm_backward(lt.x_mid.data(), lp.mlp_norm.data(), dmlp_normed.data(), dx_mid.data(),
                         gp.mlp_norm.data(), n, e);

        // attention block: x_mid = x_in + attn_out * wo
        std::vector<Real> dattn_out(n * e);
        matmul_nt(dx_mid.data(), lp.wo.data(), dattn_out.data(), n, e, e);
        matmul_tn(lt.attn_out.data(), dx_mid.data(), gp.wo.data(), n, e, e, /*accumulate=*/true);

        std::vector<Real> dq, dk, dv;
        if (trace.sparse) {
            std::vector<Real> dattn_shifted = permute_rows(dattn_out, trace.shift.perm, e);
            AttentionGrads<Real> ag = sparse_backward(
                std::span<const Real>(lt.q), std::span<const Real>(lt.k),
                std::span<const Real>(lt.v), lt.attn, std::span<const Real>(dattn_shifted),
                model_cfg_.heads, model_cfg_.head_dim, trace.layout);
            dq = unpermute_rows(ag.dq, trace.shift.perm, n, e);
            dk = unpermute_rows(ag.dk, trace.shift.perm, n, e);
            dv = unpermute_rows(ag.dv, trace.shift.perm, n, e);
        } else {
            AttentionGrads<Real> ag = dense_masked_attention_backward(
                std::span<const Real>(lt.q), std::span<const Real>(lt.k),
                std::span<const Real>(lt.v), lt.attn, std::span<const Real>(dattn_out),
                model_cfg_.heads, model_cfg_.head_dim, trace.mask);
            dq = std::move(ag.dq);
            dk = std::move(ag.dk);
            dv = std::move(ag.dv);
        }
        apply_rope(dq, seq, /*inverse=*/true);
        apply_rope(dk, seq, /*inverse=*/true);

        std::vector<Real> dattn_normed(n * e);
        matmul_nt(dq.data(), lp.wq.data(), dattn_normed.data(), n, e, e);
        matmul_nt(dk.data(), lp.wk.data(), dattn_normed.data(), n, e, e, /*accumulate=*/true);
        matmul_nt(dv.data(), lp.wv.data(), dattn_normed.data(), n, e, e, /*accumulate=*/true);
        matmul_tn(lt.attn_normed.data(), dq.data(), gp.wq.data(), n, e, e, /*accumulate=*/true);
        matmul_tn(lt.attn_normed.data(), dk.data(), gp.wk.data(), n, e, e, /*accumulate=*/true);
        matmul_tn(lt.attn_normed.data(), dv.data(), gp.wv.data(), n, e, e, /*accumulate=*/true);

        // dx for the layer input: residual + rmsnorm path
        dx = std::move(dx_mid);
        rmsnorm_backward(lt.x_in.data(), lp.attn_norm.data(), dattn_normed.data(), dx.data(),
                         gp.attn_norm.data(), n, e);
    }

    for (int64_t t = 0; t < n; ++t) {
        const TokenId id = seq.slots[t].token_id;
        Real* grow = grads.embedding.data() + id * e;
        const Real* dxr = dx.data() + t * e;
        for (int64_t i = 0; i < e; ++i) {
            grow[i] += dxr[i];
        }
    }
}

template <typename Real>
AdamW<Real>::AdamW(Parameters<Real>& params, OptimizerConfig cfg) : cfg_(cfg) {
    for (const NamedTensorRef<Real>& ref : named_tensors(params)) {
        m_.emplace_back(ref.data->size(), 0.0);
        v_.emplace_back(ref.data->size(), 0.0);
    }
}

template <typename Real>
double AdamW<Real>::lr_at(int64_t step) const {
    if (cfg_.warmup_steps > 0 && step <= cfg_.warmup_steps) {
        return cfg_.lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
    }
    const int64_t span = std::max<int64_t>(1, cfg_.total_steps - cfg_.warmup_steps);
    const double progress =
        std::min(1.0, static_cast<double>(step - cfg_.warmup_steps) / static_cast<double>(span));
    const double fraction = cfg_.final_lr_fraction;
    return cfg_.lr * (fraction + (1.0 - fraction) * 0.5 * (1.0 + std::cos(progress * M_PI)));
}

template <typename Real>
double AdamW<Real>::step(Parameters<Real>& params, Parameters<Real>& grads) {
    ++step_;
    const double lr = lr_at(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));

    std::vector<NamedTensorRef<Real>> prefs = named_tensors(params);
    std::vector<NamedTensorRef<Real>> grefs = named_tensors(grads);
    if (prefs.size() != grefs.size() || prefs.size() != m_.size()) {
        throw ShapeMismatch("optimizer state does not match parameters");
    }
    for (size_t i = 0; i < prefs.size(); ++i) {
        std::vector<Real>& p = *prefs[i].data;
        const std::vector<Real>& g = *grefs[i].data;
        if (p.size() != g.size()) {
            throw ShapeMismatch("gradient shape mismatch for " + prefs[i].name);
        }
        const bool decay = prefs[i].shape.size() > 1;  // skip norm weights
        std::vector<double>& mi = m_[i];
        std::vector<double>& vi = v_[i];
        for (size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            mi[j] = cfg_.beta1 * mi[j] + (1.0 - cfg_.beta1) * gj;
            vi[j] = cfg_.beta2 * vi[j] + (1.0 - cfg_.beta2) * gj * gj;
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            double update = mhat / (std::sqrt(vhat) + cfg_.eps);
            if (decay) {
                update += cfg_.weight_decay * static_cast<double>(p[j]);
            }
            p[j] = static_cast<Real>(static_cast<double>(p[j]) - lr * update);
        }
    }
    return lr;
}

template <typename Real>
Trainer<Real>::Trainer(Model<Real>& model, TrainConfig cfg)
    : model_(model), cfg_(cfg), optimizer_(model.params(), cfg.optimizer) {
    if (cfg_.pattern == TrainPattern::ChunkBaseline) {
        if (model_.compression_config().sink_count != 0) {
            throw ConfigError("chunk-baseline training requires sink_count == 0");
        }
        ChunkBaselineSpec spec{cfg_.chunk_len, model_.compression_config().ratio};
        spec.validate();
    }
}

template <typename Real>
AugmentedSequence Trainer<Real>::make_sequence(std::span<const TokenId> raw_tokens) const {
    if (cfg_.pattern == TrainPattern::ChunkBaseline) {
        ChunkBaselineSpec spec{cfg_.chunk_len, model_.compression_config().ratio};
        return chunk_baseline_sequence(raw_tokens, spec,
                                       static_cast<TokenId>(model_.model_config().vocab));
    }
    return augment(raw_tokens, model_.compression_config(),
                   static_cast<TokenId>(model_.model_config().vocab));
}

template <typename Real>
LossReport Trainer<Real>::step(const std::vector<std::vector<TokenId>>& batch) {
    if (batch.empty()) {
        throw ConfigError("empty batch");
    }
    Parameters<Real> grads = model_.zero_grads();
    LossReport report;
    const double inv_batch = 1.0 / static_cast<double>(batch.size());

    for (const std::vector<TokenId>& tokens : batch) {
        AugmentedSequence seq = make_sequence(tokens);
        ForwardTrace<Real> trace;
        if (cfg_.pattern == TrainPattern::ChunkBaseline) {
            ChunkBaselineSpec spec{cfg_.chunk_len, model_.compression_config().ratio};
            trace = model_.forward_trace_with_mask(seq, build_chunk_mask(seq.raw_len, spec));
        } else {
            trace = model_.forward_trace(seq, cfg_.mode);
        }
        LossReport seq_report = model_.lm_loss(trace.logits, seq);
        std::vector<Real> dlogits = model_.loss_backward(trace.logits, seq, inv_batch);
        model_.backward(trace, dlogits, grads);

        report.mean_ce += seq_report.mean_ce * inv_batch;
        report.predicting_positions += seq_report.predicting_positions;
        if (report.per_position_ce.empty()) {
            report.per_position_ce.assign(seq_report.per_position_ce.size(), 0.0);
        }
        for (size_t i = 0; i < seq_report.per_position_ce.size(); ++i) {
            report.per_position_ce[i] += seq_report.per_position_ce[i] * inv_batch;
        }
    }

    double norm_sq = 0.0;
    for (const NamedTensorRef<Real>& ref : named_tensors(grads)) {
        for (const Real g : *ref.data) {
            norm_sq += static_cast<double>(g) * g;
        }
    }
    report.grad_norm = std::sqrt(norm_sq);

    optimizer_.step(model_.params(), grads);
    return report;
}

template <typename Real>
BoundaryProfile boundary_loss_profile(const Model<Real>& model,
                                      const std::vector<std::vector<TokenId>>& data,
                                      int64_t chunk_len, TrainPattern pattern,
                                      int64_t train_chunk_len) {
    if (chunk_len <= 0) {
        throw ConfigError("chunk_len must be positive");
    }
    BoundaryProfile profile;
    profile.mean_ce.assign(chunk_len, 0.0);
    profile.count.assign(chunk_len, 0);

    for (const std::vector<TokenId>& tokens : data) {
        if (static_cast<int64_t>(tokens.size()) % chunk_len != 0) {
            throw NonDivisibleLength("eval sequence length must be a multiple of chunk_len");
        }
        AugmentedSequence seq;
        std::vector<Real> logits;
        if (pattern == TrainPattern::ChunkBaseline) {
            ChunkBaselineSpec spec{train_chunk_len, model.compression_config().ratio};
            seq = chunk_baseline_sequence(std::span<const TokenId>(tokens), spec,
                                          static_cast<TokenId>(model.model_config().vocab));
            logits = model.forward_with_mask(seq, build_chunk_mask(seq.raw_len, spec));
        } else {
            seq = augment(std::span<const TokenId>(tokens), model.compression_config(),
                          static_cast<TokenId>(model.model_config().vocab));
            logits = model.forward(seq, AttentionMode::Oracle);
        }
        const LossReport report = model.lm_loss(logits, seq);
        for (int64_t j = chunk_len; j < seq.raw_len; ++j) {  // first chunk excluded
            profile.mean_ce[j % chunk_len] += report.per_position_ce[j];
            ++profile.count[j % chunk_len];
        }
    }
    for (int64_t i = 0; i < chunk_len; ++i) {
        if (profile.count[i] > 0) {
            profile.mean_ce[i] /= static_cast<double>(profile.count[i]);
        }
    }
    return profile;
}

template void rope_rotate_row(float*, int64_t, int64_t, double, int64_t, bool);
template void rope_rotate_row(double*, int64_t, int64_t, double, int64_t, bool);
template std::vector<NamedTensorRef<float>> named_tensors(Parameters<float>&);
template std::vector<NamedTensorRef<double>> named_tensors(Parameters<double>&);
template class Model<float>;
template class Model<double>;
template class AdamW<float>;
template class AdamW<double>;
template class Trainer<float>;
template class Trainer<double>;
template BoundaryProfile boundary_loss_profile(const Model<float>&,
                                               const std::vector<std::vector<TokenId>>&, int64_t,
                                               TrainPattern, int64_t);
template BoundaryProfile boundary_loss_profile(const Model<double>&,
                                               const std::vector<std::vector<TokenId>>&, int64_t,
                                               TrainPattern, int64_t);

}  // namespace gistlm
