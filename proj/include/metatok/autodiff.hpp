#pragma once

// Tape-based reverse-mode differentiation.
//
// A Tape records every op applied during one forward pass. Each op stores
// its output and a closure that pushes the output gradient back to its inputs.
// backward() replays the closures in reverse order and adds the resulting
// gradients into the Parameter accumulators.
//
// A tape and its tensors belong to one thread.

#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metatok/kernels.hpp"
#include "metatok/tensor.hpp"

namespace metatok {

struct Var {
    std::size_t id = 0;
};

template <typename T>
class Tape {
  public:
    Var leaf(Tensor<T> value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, nullptr, /*check=*/false);
    }

    Var param(Parameter<T>& p) {
        Var v = push(p.value, true, nullptr, false);
        nodes_[v.id].param = &p;
        return v;
    }

    const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    std::vector<T>& grad(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }

    Var push(Tensor<T> value, bool requires_grad, std::function<void()> backward,
             bool check = true) {
        if (check && !all_finite(value.values)) throw NumericError("non-finite value in forward op");
        nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr, std::move(backward)});
        return Var{nodes_.size() - 1};
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(Var loss) {
        if (nodes_[loss.id].value.size() != 1) throw ShapeError("backward: loss is not a scalar");
        for (auto& n : nodes_) n.grad.clear();
        grad(loss)[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward();
        }
        for (auto& n : nodes_) {
            if (!n.param || n.grad.empty()) continue;
            auto& pg = n.param->grad;
            for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
        }
    }

  private:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
};

namespace ops {

namespace detail {
inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}
template <typename T>
bool is_matrix(const Tensor<T>& t) {
    return t.shape.size() == 2;
}
}  // namespace detail

/// Gradient stops here; the output is a constant copy.
template <typename T>
Var detach(Tape<T>& tape, Var x) {
    return tape.leaf(tape.value(x), false);
}

/// Y = X·W + b, b broadcast over rows. bias may be omitted.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, const Var* b = nullptr) {
    const auto& X = tape.value(x);
    const auto& W = tape.value(w);
    detail::require(detail::is_matrix(X) && detail::is_matrix(W), "linear: expects matrices");
    const std::size_t m = X.shape[0], k = X.shape[1], n = W.shape[1];
    detail::require(W.shape[0] == k, "linear: inner dimensions " + shape_str(X.shape) + " and " +
                                         shape_str(W.shape) + " disagree");
    if (b) detail::require(tape.value(*b).size() == n, "linear: bias length mismatch");
    Tensor<T> y({m, n});
    kernels::gemm(m, n, k, X.data(), W.data(), y.data());
    if (b) {
        const auto& B = tape.value(*b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) y.values[i * n + j] += B.values[j];
    }
    const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || (b && tape.requires_grad(*b));
    Var out{tape.size()};
    const bool has_b = b != nullptr;
    const Var bb = has_b ? *b : Var{};
    return tape.push(std::move(y), rg, [&tape, x, w, bb, has_b, out, m, k, n] {
        const auto& g = tape.grad(out);
        if (tape.requires_grad(x))
            kernels::gemm_nt(m, k, n, g.data(), tape.value(w).data(), tape.grad(x).data(), true);
        if (tape.requires_grad(w))
            kernels::gemm_tn(k, n, m, tape.value(x).data(), g.data(), tape.grad(w).data(), true);
        if (has_b && tape.requires_grad(bb)) {
            auto& gb = tape.grad(bb);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

/// Y = X·Eᵀ + b with E stored [n×k]; used for the tied output projection.
template <typename T>
Var linear_nt(Tape<T>& tape, Var x, Var e, const Var* b = nullptr) {
    const auto& X = tape.value(x);
    const auto& E = tape.value(e);
    detail::require(detail::is_matrix(X) && detail::is_matrix(E), "linear_nt: expects matrices");
    const std::size_t m = X.shape[0], k = X.shape[1], n = E.shape[0];
    detail::require(E.shape[1] == k, "linear_nt: inner dimensions disagree");
    if (b) detail::require(tape.value(*b).size() == n, "linear_nt: bias length mismatch");
    Tensor<T> y({m, n});
    kernels::gemm_nt(m, n, k, X.data(), E.data(), y.data());
    if (b) {
        const auto& B = tape.value(*b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) y.values[i * n + j] += B.values[j];
    }
    const bool rg = tape.requires_grad(x) || tape.requires_grad(e) || (b && tape.requires_grad(*b));
    Var out{tape.size()};
    const bool has_b = b != nullptr;
    const Var bb = has_b ? *b : Var{};
    return tape.push(std::move(y), rg, [&tape, x, e, bb, has_b, out, m, k, n] {
        const auto& g = tape.grad(out);
        if (tape.requires_grad(x))
            kernels::gemm(m, k, n, g.data(), tape.value(e).data(), tape.grad(x).data(), true);
        if (tape.requires_grad(e))
            kernels::gemm_tn(n, k, m, g.data(), tape.value(x).data(), tape.grad(e).data(), true);
        if (has_b && tape.requires_grad(bb)) {
            auto& gb = tape.grad(bb);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& A = tape.value(a);
    const auto& B = tape.value(b);
    detail::require(A.shape == B.shape, "add: shape mismatch " + shape_str(A.shape) + " vs " +
                                            shape_str(B.shape));
    Tensor<T> y = A;
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] += B.values[i];
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(a) || tape.requires_grad(b), [&tape, a, b, out] {
        const auto& g = tape.grad(out);
        for (Var v : {a, b}) {
            if (!tape.requires_grad(v)) continue;
            auto& gv = tape.grad(v);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T c) {
    Tensor<T> y = tape.value(x);
    for (auto& v : y.values) v *= c;
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x), [&tape, x, out, c] {
        const auto& g = tape.grad(out);
        auto& gx = tape.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
    T s = 0;
    for (T v : tape.value(x).values) s += v;
    Var out{tape.size()};
    return tape.push(Tensor<T>({1}, {s}), tape.requires_grad(x), [&tape, x, out] {
        const T g = tape.grad(out)[0];
        for (auto& gx : tape.grad(x)) gx += g;
    });
}

template <typename T>
Var sum_squares(Tape<T>& tape, Var x) {
    T s = 0;
    for (T v : tape.value(x).values) s += v * v;
    Var out{tape.size()};
    return tape.push(Tensor<T>({1}, {s}), tape.requires_grad(x), [&tape, x, out] {
        const T g = tape.grad(out)[0];
        const auto& X = tape.value(x);
        auto& gx = tape.grad(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * X.values[i] * g;
    });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    Tensor<T> y = tape.value(x);
    for (auto& v : y.values) v = v > T(0) ? v : T(0);
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x), [&tape, x, out] {
        const auto& g = tape.grad(out);
        const auto& X = tape.value(x);
        auto& gx = tape.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (X.values[i] > T(0)) gx[i] += g[i];
    });
}

/// Inverted dropout: zeroes each entry with probability p and scales the rest by 1/(1-p).
template <typename T, typename Rng>
Var dropout(Tape<T>& tape, Var x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    detail::require(p < 1.0, "dropout: p must be below 1");
    Tensor<T> y = tape.value(x);
    std::vector<T> keep(y.size());
    std::bernoulli_distribution coin(1.0 - p);
    const T s = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < y.size(); ++i) {
        keep[i] = coin(rng) ? s : T(0);
        y.values[i] *= keep[i];
    }
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x), [&tape, x, out, keep = std::move(keep)] {
        const auto& g = tape.grad(out);
        auto& gx = tape.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * keep[i];
    });
}

/// Row-wise softmax; -inf entries get weight 0, rows with no finite entry are zero.
template <typename T>
Var softmax_rows(Tape<T>& tape, Var x) {
    const auto& X = tape.value(x);
    detail::require(detail::is_matrix(X), "softmax_rows: expects a matrix");
    const std::size_t r = X.shape[0], c = X.shape[1];
    Tensor<T> y({r, c});
    kernels::softmax_rows(r, c, X.data(), y.data());
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x), [&tape, x, out, r, c] {
        const auto& g = tape.grad(out);
        const auto& Y = tape.value(out);
        auto& gx = tape.grad(x);
        for (std::size_t i = 0; i < r; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * Y.values[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += Y.values[i * c + j] * (g[i * c + j] - dot);
        }
    });
}

/// (x - mean) / (std + eps) over the last dimension.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, T eps) {
    const auto& X = tape.value(x);
    detail::require(!X.shape.empty() && X.shape.back() >= 1, "layer_norm: empty feature dimension");
    detail::require(eps > T(0), "layer_norm: eps must be positive");
    const std::size_t d = X.shape.back(), rows = X.size() / d;
    Tensor<T> y(X.shape);
    std::vector<T> inv(rows), sd(rows);
    kernels::layer_norm_rows(rows, d, X.data(), y.data(), eps, inv.data(), sd.data());
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x),
                     [&tape, x, out, d, rows, inv = std::move(inv), sd = std::move(sd)] {
                         const auto& g = tape.grad(out);
                         const auto& Y = tape.value(out);
                         auto& gx = tape.grad(x);
                         for (std::size_t i = 0; i < rows; ++i) {
                             const T* gi = g.data() + i * d;
                             const T* yi = Y.data() + i * d;
                             T gmean = 0, gy = 0;
                             for (std::size_t j = 0; j < d; ++j) {
                                 gmean += gi[j];
                                 gy += gi[j] * yi[j];
                             }
                             gmean /= static_cast<T>(d);
                             // y = xc·r, so the std term reduces to gy·y_j / (d·std)
                             const T r = inv[i];
                             const T coef = sd[i] > T(0) ? gy / (static_cast<T>(d) * sd[i]) : T(0);
                             for (std::size_t j = 0; j < d; ++j)
                                 gx[i * d + j] += r * (gi[j] - gmean) - coef * yi[j];
                         }
                     });
}

/// y = x ⊙ gain + bias, gain and bias broadcast over rows.
template <typename T>
Var affine_cols(Tape<T>& tape, Var x, Var gain, Var bias) {
    const auto& X = tape.value(x);
    const std::size_t d = X.shape.back(), rows = X.size() / d;
    detail::require(tape.value(gain).size() == d && tape.value(bias).size() == d,
                    "affine_cols: gain/bias length mismatch");
    Tensor<T> y(X.shape);
    const auto& G = tape.value(gain).values;
    const auto& B = tape.value(bias).values;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) y.values[i * d + j] = X.values[i * d + j] * G[j] + B[j];
    const bool rg = tape.requires_grad(x) || tape.requires_grad(gain) || tape.requires_grad(bias);
    Var out{tape.size()};
    return tape.push(std::move(y), rg, [&tape, x, gain, bias, out, d, rows] {
        const auto& g = tape.grad(out);
        const auto& X = tape.value(x);
        if (tape.requires_grad(x)) {
            const auto& G = tape.value(gain).values;
            auto& gx = tape.grad(x);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * G[j];
        }
        if (tape.requires_grad(gain)) {
            auto& gg = tape.grad(gain);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * X.values[i * d + j];
        }
        if (tape.requires_grad(bias)) {
            auto& gb = tape.grad(bias);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
    });
}

/// out[t] = table[rows[t]], or zero where zero_rows[t] is set.
template <typename T>
Var gather_rows(Tape<T>& tape, Var table, std::span<const std::size_t> rows,
                std::span<const std::uint8_t> zero_rows = {}) {
    const auto& E = tape.value(table);
    detail::require(detail::is_matrix(E), "gather_rows: table must be a matrix");
    const std::size_t d = E.shape[1], n = rows.size();
    detail::require(zero_rows.empty() || zero_rows.size() == n, "gather_rows: mask length mismatch");
    Tensor<T> y({n, d});
    for (std::size_t t = 0; t < n; ++t) {
        detail::require(rows[t] < E.shape[0], "gather_rows: row index out of range");
        if (!zero_rows.empty() && zero_rows[t]) continue;
        std::copy_n(E.data() + rows[t] * d, d, y.data() + t * d);
    }
    Var out{tape.size()};
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<std::uint8_t> zr(zero_rows.begin(), zero_rows.end());
    return tape.push(std::move(y), tape.requires_grad(table),
                     [&tape, table, out, d, idx = std::move(idx), zr = std::move(zr)] {
                         const auto& g = tape.grad(out);
                         auto& ge = tape.grad(table);
                         for (std::size_t t = 0; t < idx.size(); ++t) {
                             if (!zr.empty() && zr[t]) continue;
                             for (std::size_t j = 0; j < d; ++j) ge[idx[t] * d + j] += g[t * d + j];
                         }
                     });
}

/// Rotates each head's (2i, 2i+1) feature pairs of row t by the angle whose
/// cosine and sine are cos[t·half + i], sin[t·half + i], half = head_dim/2.
template <typename T>
Var rotary(Tape<T>& tape, Var x, std::size_t n_heads, std::vector<T> cos_t, std::vector<T> sin_t) {
    const auto& X = tape.value(x);
    detail::require(detail::is_matrix(X), "rotary: expects a matrix");
    const std::size_t rows = X.shape[0], d = X.shape[1];
    detail::require(n_heads > 0 && d % n_heads == 0, "rotary: width not divisible by heads");
    const std::size_t dk = d / n_heads;
    detail::require(dk % 2 == 0, "rotary: head dimension must be even");
    const std::size_t half = dk / 2;
    detail::require(cos_t.size() == rows * half && sin_t.size() == rows * half,
                    "rotary: angle table size mismatch");
    Tensor<T> y({rows, d});
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t c0 = t * d + h * dk + 2 * i;
                const T cs = cos_t[t * half + i], sn = sin_t[t * half + i];
                const T x0 = X.values[c0], x1 = X.values[c0 + 1];
                y.values[c0] = x0 * cs - x1 * sn;
                y.values[c0 + 1] = x0 * sn + x1 * cs;
            }
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x),
                     [&tape, x, out, rows, d, dk, half, n_heads, cos_t = std::move(cos_t),
                      sin_t = std::move(sin_t)] {
                         const auto& g = tape.grad(out);
                         auto& gx = tape.grad(x);
                         for (std::size_t t = 0; t < rows; ++t)
                             for (std::size_t h = 0; h < n_heads; ++h)
                                 for (std::size_t i = 0; i < half; ++i) {
                                     const std::size_t c0 = t * d + h * dk + 2 * i;
                                     const T cs = cos_t[t * half + i], sn = sin_t[t * half + i];
                                     gx[c0] += g[c0] * cs + g[c0 + 1] * sn;
                                     gx[c0 + 1] += -g[c0] * sn + g[c0 + 1] * cs;
                                 }
                     });
}

/// Optional per-head capture of attention logits and weights, [heads][T×T].
template <typename T>
struct AttentionCapture {
    std::vector<std::vector<T>> logits;  // scaled scores; masked entries -inf
    std::vector<std::vector<T>> weights;
};

/// Multi-head scaled dot-product attention over q, k, v [T×d].
///
/// allowed is a dense T×T admissibility matrix shared by all heads. A query
/// row with no admissible key outputs the zero vector. block_starts splits the
/// rows into independent diagonal blocks (packed sequences); entries of
/// allowed outside those blocks are never read.
template <typename T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads, T logit_scale,
              const std::vector<std::uint8_t>& allowed, AttentionCapture<T>* capture = nullptr,
              std::span<const std::size_t> block_starts = {}) {
    const auto& Q = tape.value(q);
    const auto& K = tape.value(k);
    const auto& V = tape.value(v);
    detail::require(detail::is_matrix(Q) && Q.shape == K.shape && Q.shape == V.shape,
                    "attention: q, k, v must share one matrix shape");
    const std::size_t n = Q.shape[0], d = Q.shape[1];
    detail::require(n_heads > 0 && d % n_heads == 0, "attention: width not divisible by heads");
    detail::require(allowed.size() == n * n, "attention: mask size mismatch");
    const std::size_t dk = d / n_heads;
    constexpr T ninf = -std::numeric_limits<T>::infinity();

    // block boundaries and the offset of each block's probabilities
    std::vector<std::size_t> bounds;
    if (block_starts.empty() || block_starts.front() != 0) bounds.push_back(0);
    for (std::size_t b : block_starts) {
        detail::require(b <= n && (bounds.empty() || b >= bounds.back()), "attention: bad block starts");
        if (bounds.empty() || b != bounds.back()) bounds.push_back(b);
    }
    if (bounds.back() != n) bounds.push_back(n);
    const std::size_t nblocks = bounds.size() - 1;
    std::vector<std::size_t> poff(nblocks + 1, 0);
    for (std::size_t b = 0; b < nblocks; ++b) {
        const std::size_t nb = bounds[b + 1] - bounds[b];
        poff[b + 1] = poff[b] + nb * nb;
    }
    const std::size_t per_head = poff.back();

    std::vector<T> probs(n_heads * per_head);
    Tensor<T> y({n, d});
    if (capture) {
        capture->logits.assign(n_heads, std::vector<T>(n * n, ninf));
        capture->weights.assign(n_heads, std::vector<T>(n * n, T(0)));
    }
    const long work = static_cast<long>(n_heads * nblocks);
#pragma omp parallel for schedule(dynamic) if (work > 1 && per_head * d > (1u << 14))
    for (long wl = 0; wl < work; ++wl) {
        const std::size_t h = static_cast<std::size_t>(wl) / nblocks, b = static_cast<std::size_t>(wl) % nblocks;
        const std::size_t r0 = bounds[b], nb = bounds[b + 1] - r0;
        std::vector<T> qh(nb * dk), kh(nb * dk), vh(nb * dk), s(nb * nb), oh(nb * dk);
        for (std::size_t t = 0; t < nb; ++t)
            for (std::size_t j = 0; j < dk; ++j) {
                qh[t * dk + j] = Q.values[(r0 + t) * d + h * dk + j];
                kh[t * dk + j] = K.values[(r0 + t) * d + h * dk + j];
                vh[t * dk + j] = V.values[(r0 + t) * d + h * dk + j];
            }
        kernels::gemm_nt(nb, nb, dk, qh.data(), kh.data(), s.data());
        for (std::size_t i = 0; i < nb; ++i)
            for (std::size_t j = 0; j < nb; ++j)
                s[i * nb + j] = allowed[(r0 + i) * n + r0 + j] ? s[i * nb + j] * logit_scale : ninf;
        T* a = probs.data() + h * per_head + poff[b];
        kernels::serial::softmax_rows(nb, nb, s.data(), a);
        kernels::gemm(nb, dk, nb, a, vh.data(), oh.data());
        for (std::size_t t = 0; t < nb; ++t)
            for (std::size_t j = 0; j < dk; ++j) y.values[(r0 + t) * d + h * dk + j] = oh[t * dk + j];
        if (capture)
            for (std::size_t i = 0; i < nb; ++i)
                for (std::size_t j = 0; j < nb; ++j) {
                    capture->logits[h][(r0 + i) * n + r0 + j] = s[i * nb + j];
                    capture->weights[h][(r0 + i) * n + r0 + j] = a[i * nb + j];
                }
    }
    const bool rg = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
    Var out{tape.size()};
    return tape.push(std::move(y), rg, [&tape, q, k, v, out, d, dk, n_heads, logit_scale, per_head,
                                        bounds = std::move(bounds), poff = std::move(poff),
                                        probs = std::move(probs)] {
        const auto& g = tape.grad(out);
        const auto& Q = tape.value(q);
        const auto& K = tape.value(k);
        const auto& V = tape.value(v);
        auto& gq = tape.grad(q);
        auto& gk = tape.grad(k);
        auto& gv = tape.grad(v);
        const std::size_t nblocks = bounds.size() - 1;
        const long work = static_cast<long>(n_heads * nblocks);
        // blocks own disjoint rows and heads own disjoint columns, so writes never overlap
#pragma omp parallel for schedule(dynamic) if (work > 1 && per_head * d > (1u << 14))
        for (long wl = 0; wl < work; ++wl) {
            const std::size_t h = static_cast<std::size_t>(wl) / nblocks, b = static_cast<std::size_t>(wl) % nblocks;
            const std::size_t r0 = bounds[b], nb = bounds[b + 1] - r0;
            std::vector<T> qh(nb * dk), kh(nb * dk), vh(nb * dk), go(nb * dk), da(nb * nb);
            std::vector<T> dq(nb * dk), dkk(nb * dk), dv(nb * dk);
            for (std::size_t t = 0; t < nb; ++t)
                for (std::size_t j = 0; j < dk; ++j) {
                    const std::size_t at = (r0 + t) * d + h * dk + j;
                    qh[t * dk + j] = Q.values[at];
                    kh[t * dk + j] = K.values[at];
                    vh[t * dk + j] = V.values[at];
                    go[t * dk + j] = g[at];
                }
            const T* a = probs.data() + h * per_head + poff[b];
            kernels::gemm_nt(nb, nb, dk, go.data(), vh.data(), da.data());
            kernels::gemm_tn(nb, dk, nb, a, go.data(), dv.data());
            for (std::size_t i = 0; i < nb; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < nb; ++j) dot += a[i * nb + j] * da[i * nb + j];
                for (std::size_t j = 0; j < nb; ++j)
                    da[i * nb + j] = a[i * nb + j] * (da[i * nb + j] - dot) * logit_scale;
            }
            kernels::gemm(nb, dk, nb, da.data(), kh.data(), dq.data());
            kernels::gemm_tn(nb, dk, nb, da.data(), qh.data(), dkk.data());
            for (std::size_t t = 0; t < nb; ++t)
                for (std::size_t j = 0; j < dk; ++j) {
                    const std::size_t at = (r0 + t) * d + h * dk + j;
                    gq[at] += dq[t * dk + j];
                    gk[at] += dkk[t * dk + j];
                    gv[at] += dv[t * dk + j];
                }
        }
    });
}

/// Rows of x selected by index, in the given order.
template <typename T>
Var select_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows) {
    const auto& X = tape.value(x);
    detail::require(detail::is_matrix(X), "select_rows: expects a matrix");
    const std::size_t d = X.shape[1];
    Tensor<T> y({rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        detail::require(rows[r] < X.shape[0], "select_rows: row out of range");
        std::copy_n(X.data() + rows[r] * d, d, y.data() + r * d);
    }
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x), [&tape, x, out, d, rows = std::move(rows)] {
        const auto& g = tape.grad(out);
        auto& gx = tape.grad(x);
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) gx[rows[r] * d + j] += g[r * d + j];
    });
}

/// [n_rows×d] matrix with row rows[r] = x[r] and zeros elsewhere.
template <typename T>
Var scatter_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows, std::size_t n_rows) {
    const auto& X = tape.value(x);
    detail::require(detail::is_matrix(X) && X.shape[0] == rows.size(),
                    "scatter_rows: row count mismatch");
    const std::size_t d = X.shape[1];
    Tensor<T> y({n_rows, d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        detail::require(rows[r] < n_rows, "scatter_rows: row out of range");
        std::copy_n(X.data() + r * d, d, y.data() + rows[r] * d);
    }
    Var out{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x), [&tape, x, out, d, rows = std::move(rows)] {
        const auto& g = tape.grad(out);
        auto& gx = tape.grad(x);
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[rows[r] * d + j];
    });
}

/// Mean over rows with mask set of -log softmax(logits_t)[targets_t].
/// Rows with mask unset contribute neither loss nor gradient.
template <typename T>
Var cross_entropy_masked(Tape<T>& tape, Var logits, std::span<const std::size_t> targets,
                         std::span<const std::uint8_t> mask) {
    const auto& L = tape.value(logits);
    detail::require(detail::is_matrix(L), "cross_entropy_masked: logits must be a matrix");
    const std::size_t rows = L.shape[0], vocab = L.shape[1];
    detail::require(targets.size() == rows && mask.size() == rows,
                    "cross_entropy_masked: targets/mask length mismatch");
    std::size_t count = 0;
    for (std::size_t t = 0; t < rows; ++t) {
        if (!mask[t]) continue;
        detail::require(targets[t] < vocab, "cross_entropy_masked: target out of range");
        ++count;
    }
    if (count == 0) throw std::invalid_argument("empty loss");
    std::vector<T> probs(rows * vocab, T(0));
    T total = 0;
    for (std::size_t t = 0; t < rows; ++t) {
        if (!mask[t]) continue;
        const T* li = L.data() + t * vocab;
        kernels::serial::softmax_rows(1, vocab, li, probs.data() + t * vocab);
        T mx = li[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, li[j]);
        T se = 0;
        for (std::size_t j = 0; j < vocab; ++j) se += std::exp(li[j] - mx);
        total += (mx + std::log(se)) - li[targets[t]];
    }
    const T mean = total / static_cast<T>(count);
    Var out{tape.size()};
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    return tape.push(Tensor<T>({1}, {mean}), tape.requires_grad(logits),
                     [&tape, logits, out, rows, vocab, count, probs = std::move(probs),
                      tg = std::move(tg), mk = std::move(mk)] {
                         const T g = tape.grad(out)[0] / static_cast<T>(count);
                         auto& gl = tape.grad(logits);
                         for (std::size_t t = 0; t < rows; ++t) {
                             if (!mk[t]) continue;
                             for (std::size_t j = 0; j < vocab; ++j)
                                 gl[t * vocab + j] += g * probs[t * vocab + j];
                             gl[t * vocab + tg[t]] -= g;
                         }
                     });
}

}  // namespace ops
}  // namespace metatok
