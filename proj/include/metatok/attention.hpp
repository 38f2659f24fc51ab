#pragma once

// Causal multi-head attention and meta-attention.
//
// Meta-attention adds the meta mask P to the causal mask M: query i may see
// key j only when j <= i and both are meta positions. Query rows with no
// admissible key produce the zero vector after the output projection, so the
// residual add around the layer is the identity there.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "metatok/autodiff.hpp"

namespace metatok {

struct MaskPair {
    std::size_t seq_len = 0;
    std::vector<std::uint8_t> causal;  // 1 = admissible (logit offset 0), 0 = -inf
    std::vector<std::uint8_t> meta;
    // first row of each packed sequence; empty means one sequence
    std::vector<std::size_t> blocks;

    static double offset(std::uint8_t allowed) {
        return allowed ? 0.0 : -std::numeric_limits<double>::infinity();
    }
    double causal_at(std::size_t i, std::size_t j) const { return offset(causal[i * seq_len + j]); }
    double meta_at(std::size_t i, std::size_t j) const { return offset(meta[i * seq_len + j]); }

    /// Admissibility of M + P.
    std::vector<std::uint8_t> combined() const {
        std::vector<std::uint8_t> c(causal.size());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = causal[i] && meta[i];
        return c;
    }
};

MaskPair build_masks(std::size_t seq_len, std::span<const std::size_t> meta_positions);

/// Shannon entropy in nats with 0·log 0 = 0. Throws std::invalid_argument
/// when the row is not a distribution (negative entry or sum off by > 1e-6).
double row_entropy(std::span<const double> row);

struct HeadTrace {
    std::vector<double> weights;  // [T×T]
    std::vector<double> logits;   // [T×T], -inf where masked
    std::vector<double> entropy;  // [T]; 0 for all-zero rows
};

struct AttentionTrace {
    std::size_t seq_len = 0;
    std::size_t d_model = 0;
    std::vector<std::vector<HeadTrace>> causal;   // [layer][head]
    std::vector<std::vector<HeadTrace>> meta;     // [layer][head], empty when the layer is absent
    std::vector<std::vector<double>> residual;    // [n_layers + 1][T×d]
    std::vector<std::size_t> meta_positions;
};

template <typename T>
struct AttentionWeights {
    Parameter<T>* wq = nullptr;
    Parameter<T>* bq = nullptr;
    Parameter<T>* wk = nullptr;
    Parameter<T>* bk = nullptr;
    Parameter<T>* wv = nullptr;
    Parameter<T>* bv = nullptr;
    Parameter<T>* wo = nullptr;
    Parameter<T>* bo = nullptr;
};

/// Per-forward rotary tables for head dimension dk: cos/sin laid out [T × dk/2].
template <typename T>
struct RotaryTables {
    std::size_t half = 0;
    std::vector<T> cos;
    std::vector<T> sin;

    static RotaryTables from_angles(std::span<const double> angles, std::size_t half) {
        RotaryTables r;
        r.half = half;
        r.cos.resize(angles.size());
        r.sin.resize(angles.size());
        for (std::size_t i = 0; i < angles.size(); ++i) {
            r.cos[i] = static_cast<T>(std::cos(angles[i]));
            r.sin[i] = static_cast<T>(std::sin(angles[i]));
        }
        return r;
    }

    RotaryTables rows(std::span<const std::size_t> idx) const {
        RotaryTables r;
        r.half = half;
        for (std::size_t t : idx) {
            r.cos.insert(r.cos.end(), cos.begin() + t * half, cos.begin() + (t + 1) * half);
            r.sin.insert(r.sin.end(), sin.begin() + t * half, sin.begin() + (t + 1) * half);
        }
        return r;
    }
};

struct AttentionOptions {
    std::size_t n_heads = 1;
    double logit_multiplier = 1.0;  // YaRN attention temperature
};

enum class MetaKernel { Dense, Compact };

namespace detail {

template <typename T>
HeadTrace to_head_trace(const std::vector<T>& w, const std::vector<T>& l, std::size_t n) {
    HeadTrace h;
    h.weights.assign(w.begin(), w.end());
    h.logits.assign(l.begin(), l.end());
    h.entropy.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::span<const double> row(h.weights.data() + i * n, n);
        double s = 0;
        for (double v : row) s += v;
        if (s > 0) h.entropy[i] = row_entropy(row);
    }
    return h;
}

template <typename T>
std::vector<HeadTrace> collect(const ops::AttentionCapture<T>& cap, std::size_t n) {
    std::vector<HeadTrace> out;
    for (std::size_t h = 0; h < cap.weights.size(); ++h) out.push_back(to_head_trace(cap.weights[h], cap.logits[h], n));
    return out;
}

template <typename T>
void project_qkv(Tape<T>& tape, Var x, const AttentionWeights<T>& w, Var& q, Var& k, Var& v) {
    Var wq = tape.param(*w.wq), bq = tape.param(*w.bq);
    Var wk = tape.param(*w.wk), bk = tape.param(*w.bk);
    Var wv = tape.param(*w.wv), bv = tape.param(*w.bv);
    q = ops::linear(tape, x, wq, &bq);
    k = ops::linear(tape, x, wk, &bk);
    v = ops::linear(tape, x, wv, &bv);
}

template <typename T>
Var project_out(Tape<T>& tape, Var a, const AttentionWeights<T>& w) {
    Var wo = tape.param(*w.wo), bo = tape.param(*w.bo);
    return ops::linear(tape, a, wo, &bo);
}

}  // namespace detail

/// softmax(QKᵀ/√d_k · mult + M)·V with optional rotary Q/K, then the output projection.
template <typename T>
Var causal_mha(Tape<T>& tape, Var x, const AttentionWeights<T>& w, const AttentionOptions& opt,
               const std::type_identity_t<RotaryTables<T>>* rope, const MaskPair& masks,
               std::vector<HeadTrace>* trace = nullptr) {
    const auto& X = tape.value(x);
    if (X.shape.size() != 2 || X.shape[0] != masks.seq_len)
        throw ShapeError("causal_mha: input rows do not match mask length");
    const std::size_t d = X.shape[1];
    if (opt.n_heads == 0 || d % opt.n_heads != 0) throw ShapeError("causal_mha: width not divisible by heads");
    Var q, k, v;
    detail::project_qkv(tape, x, w, q, k, v);
    if (rope) {
        q = ops::rotary(tape, q, opt.n_heads, rope->cos, rope->sin);
        k = ops::rotary(tape, k, opt.n_heads, rope->cos, rope->sin);
    }
    const T sc = static_cast<T>(opt.logit_multiplier / std::sqrt(static_cast<double>(d / opt.n_heads)));
    ops::AttentionCapture<T> cap;
    Var a = ops::attention(tape, q, k, v, opt.n_heads, sc, masks.causal, trace ? &cap : nullptr, masks.blocks);
    if (trace) *trace = detail::collect(cap, masks.seq_len);
    return detail::project_out(tape, a, w);
}

/// softmax(QKᵀ/√d_k · mult + M + P)·V, output projection, zero rows off P.
///
/// Dense materializes the full T×T mask; Compact runs the same computation on
/// the gathered meta rows only. Both produce identical values.
template <typename T>
Var meta_attention(Tape<T>& tape, Var x, const AttentionWeights<T>& w, const AttentionOptions& opt,
                   const std::type_identity_t<RotaryTables<T>>* rope, const MaskPair& masks,
                   std::span<const std::size_t> meta_positions, MetaKernel kernel = MetaKernel::Compact,
                   std::vector<HeadTrace>* trace = nullptr) {
    const auto& X = tape.value(x);
    if (X.shape.size() != 2 || X.shape[0] != masks.seq_len)
        throw ShapeError("meta_attention: input rows do not match mask length");
    const std::size_t n = X.shape[0], d = X.shape[1];
    if (opt.n_heads == 0 || d % opt.n_heads != 0) throw ShapeError("meta_attention: width not divisible by heads");
    std::vector<std::size_t> pos(meta_positions.begin(), meta_positions.end());
    std::sort(pos.begin(), pos.end());
    const T sc = static_cast<T>(opt.logit_multiplier / std::sqrt(static_cast<double>(d / opt.n_heads)));

    if (pos.empty()) {
        if (trace) {
            trace->assign(opt.n_heads, HeadTrace{});
            for (auto& h : *trace) {
                h.weights.assign(n * n, 0.0);
                h.logits.assign(n * n, -std::numeric_limits<double>::infinity());
                h.entropy.assign(n, 0.0);
            }
        }
        return tape.leaf(Tensor<T>({n, d}), false);
    }

    ops::AttentionCapture<T> cap;
    if (kernel == MetaKernel::Dense) {
        Var q, k, v;
        detail::project_qkv(tape, x, w, q, k, v);
        if (rope) {
            q = ops::rotary(tape, q, opt.n_heads, rope->cos, rope->sin);
            k = ops::rotary(tape, k, opt.n_heads, rope->cos, rope->sin);
        }
        Var a = ops::attention(tape, q, k, v, opt.n_heads, sc, masks.combined(), trace ? &cap : nullptr,
                               masks.blocks);
        if (trace) *trace = detail::collect(cap, n);
        Var o = detail::project_out(tape, a, w);
        return ops::scatter_rows(tape, ops::select_rows(tape, o, pos), pos, n);
    }

    const std::size_t m = pos.size();
    Var xs = ops::select_rows(tape, x, pos);
    Var q, k, v;
    detail::project_qkv(tape, xs, w, q, k, v);
    if (rope) {
        const auto sub = rope->rows(pos);
        q = ops::rotary(tape, q, opt.n_heads, sub.cos, sub.sin);
        k = ops::rotary(tape, k, opt.n_heads, sub.cos, sub.sin);
    }
    std::vector<std::uint8_t> allowed(m * m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            allowed[i * m + j] = masks.causal[pos[i] * n + pos[j]] && masks.meta[pos[i] * n + pos[j]];
    std::vector<std::size_t> sub_blocks;
    for (std::size_t b : masks.blocks)
        sub_blocks.push_back(static_cast<std::size_t>(std::lower_bound(pos.begin(), pos.end(), b) - pos.begin()));
    Var a = ops::attention(tape, q, k, v, opt.n_heads, sc, allowed, trace ? &cap : nullptr, sub_blocks);
    if (trace) {
        // expand the compact rows back to full T×T
        trace->clear();
        for (std::size_t h = 0; h < opt.n_heads; ++h) {
            std::vector<T> wf(n * n, T(0));
            std::vector<T> lf(n * n, -std::numeric_limits<T>::infinity());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    wf[pos[i] * n + pos[j]] = cap.weights[h][i * m + j];
                    lf[pos[i] * n + pos[j]] = cap.logits[h][i * m + j];
                }
            trace->push_back(detail::to_head_trace(wf, lf, n));
        }
    }
    Var o = detail::project_out(tape, a, w);
    return ops::scatter_rows(tape, o, pos, n);
}

}  // namespace metatok
