#include "metatok/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "metatok/kernels.hpp"

namespace metatok {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& key) {
    double v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument("bad number for " + key + ": " + s);
    return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& key) {
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument("bad integer for " + key + ": " + s);
    return v;
}

bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("bad boolean for " + key + ": " + s);
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers == 0) throw std::invalid_argument("model: n_layers must be positive");
    if (n_heads == 0 || d_model % n_heads != 0)
        throw std::invalid_argument("model: d_model must be divisible by n_heads");
    if (pe.mode == PEMode::ROPE && (d_model / n_heads) % 2 != 0)
        throw std::invalid_argument("model: rotary needs an even head dimension");
    if (block_size == 0) throw std::invalid_argument("model: block_size must be positive");
    if (vocab_size == 0) throw std::invalid_argument("model: vocab_size must be positive");
    if (!(meta_fraction >= 0.0 && meta_fraction <= 1.0))
        throw std::invalid_argument("model: meta_fraction must lie in [0, 1]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout must lie in [0, 1)");
    if (meta_id >= vocab_size || newline_id >= vocab_size)
        throw std::invalid_argument("model: special ids outside the vocabulary");
    if (!(ln_eps > 0.0)) throw std::invalid_argument("model: ln_eps must be positive");
    pe.validate();
}

std::size_t ModelConfig::max_context() const {
    if (pe.mode == PEMode::APE) return block_size;
    if (pe.yarn) {
        const auto ext = static_cast<std::size_t>(std::ceil(pe.yarn->scale * pe.yarn->original_max_seq_len));
        return std::max(block_size, ext);
    }
    return std::numeric_limits<std::size_t>::max();
}

bool ModelConfig::operator==(const ModelConfig& o) const { return config_fields(*this) == config_fields(o); }

std::size_t analytic_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model, V = c.vocab_size;
    const std::size_t attn = 4 * d * d + 4 * d;
    const std::size_t mlp = d * 4 * d + 4 * d + 4 * d * d + d;
    const std::size_t per_layer = attn + mlp + 4 * d + (c.meta_attention ? attn + 2 * d : 0);
    return V * d + (c.pe.mode == PEMode::APE ? c.block_size * d : 0) + c.n_layers * per_layer + 2 * d + V;
}

InjectResult inject_meta(std::span<const std::size_t> ids, double k, std::size_t meta_id,
                         std::mt19937_64& rng, std::size_t max_len) {
    if (!(k >= 0.0 && k <= 1.0)) throw std::invalid_argument("inject_meta: k must lie in [0, 1]");
    const std::size_t n = ids.size();
    const auto m = static_cast<std::size_t>(std::floor(k * static_cast<double>(n)));
    const std::size_t total = n + m;
    // partial Fisher-Yates picks M distinct slots out of n + M
    std::vector<std::size_t> slots(total);
    for (std::size_t i = 0; i < total; ++i) slots[i] = i;
    for (std::size_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, total - 1);
        std::swap(slots[i], slots[pick(rng)]);
    }
    std::vector<std::uint8_t> is_meta(total, 0);
    for (std::size_t i = 0; i < m; ++i) is_meta[slots[i]] = 1;
    InjectResult out;
    const std::size_t len = std::min(total, max_len);
    out.ids.reserve(len);
    std::size_t src = 0;
    for (std::size_t p = 0; p < len; ++p) {
        if (is_meta[p]) {
            out.ids.push_back(meta_id);
            out.meta_positions.push_back(p);
        } else {
            out.ids.push_back(ids[src++]);
        }
    }
    return out;
}

std::vector<std::size_t> meta_positions_of(std::span<const std::size_t> ids, std::size_t meta_id) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == meta_id) out.push_back(i);
    return out;
}

LmTargets lm_targets(std::span<const std::size_t> ids, std::span<const std::size_t> meta_positions,
                     bool retarget) {
    const std::size_t n = ids.size();
    std::vector<std::uint8_t> is_meta(n, 0);
    for (std::size_t p : meta_positions) {
        if (p >= n) throw std::out_of_range("lm_targets: meta position out of range");
        is_meta[p] = 1;
    }
    LmTargets t;
    t.targets.assign(n, 0);
    t.mask.assign(n, 0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        std::size_t j = i + 1;
        if (retarget)
            while (j < n && is_meta[j]) ++j;
        if (j >= n || is_meta[j]) continue;
        t.targets[i] = ids[j];
        t.mask[i] = 1;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model, V = cfg_.vocab_size;
    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<double> init(0.0, 0.02);
    auto weight = [&](const std::string& name, std::size_t r, std::size_t c) {
        Tensor<T> t({r, c});
        for (auto& v : t.values) v = static_cast<T>(init(rng));
        return &store_.add(name, std::move(t), true);
    };
    auto vec = [&](const std::string& name, std::size_t n, T fill) {
        return &store_.add(name, Tensor<T>({n}, fill), false);
    };
    auto attention = [&](const std::string& p) {
        AttentionWeights<T> w;
        w.wq = weight(p + "wq", d, d);
        w.bq = vec(p + "bq", d, T(0));
        w.wk = weight(p + "wk", d, d);
        w.bk = vec(p + "bk", d, T(0));
        w.wv = weight(p + "wv", d, d);
        w.bv = vec(p + "bv", d, T(0));
        w.wo = weight(p + "wo", d, d);
        w.bo = vec(p + "bo", d, T(0));
        return w;
    };

    tok_emb_ = weight("tok_emb", V, d);
    if (cfg_.pe.mode == PEMode::APE) pos_emb_ = weight("pos_emb", cfg_.block_size, d);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        LayerParams L{};
        L.attn_ln_g = vec(p + "attn_ln.gain", d, T(1));
        L.attn_ln_b = vec(p + "attn_ln.bias", d, T(0));
        L.attn = attention(p + "attn.");
        if (cfg_.meta_attention) {
            L.meta_ln_g = vec(p + "meta_ln.gain", d, T(1));
            L.meta_ln_b = vec(p + "meta_ln.bias", d, T(0));
            L.meta = attention(p + "meta.");
        }
        L.mlp_ln_g = vec(p + "mlp_ln.gain", d, T(1));
        L.mlp_ln_b = vec(p + "mlp_ln.bias", d, T(0));
        L.w1 = weight(p + "mlp.w1", d, 4 * d);
        L.b1 = vec(p + "mlp.b1", 4 * d, T(0));
        L.w2 = weight(p + "mlp.w2", 4 * d, d);
        L.b2 = vec(p + "mlp.b2", d, T(0));
        layers_.push_back(L);
    }
    lnf_g_ = vec("ln_f.gain", d, T(1));
    lnf_b_ = vec("ln_f.bias", d, T(0));
    lm_bias_ = vec("lm_head.bias", V, T(0));
}

template <typename T>
Var Model<T>::forward(Tape<T>& tape, std::span<const std::size_t> ids,
                      std::span<const std::size_t> meta_positions, const ForwardOptions& opt) {
    Sequence s{std::vector<std::size_t>(ids.begin(), ids.end()),
               std::vector<std::size_t>(meta_positions.begin(), meta_positions.end())};
    return forward(tape, std::span<const Sequence>(&s, 1), opt);
}

template <typename T>
Var Model<T>::forward(Tape<T>& tape, std::span<const Sequence> batch, const ForwardOptions& opt) {
    if (batch.empty()) throw std::invalid_argument("forward: empty batch");
    if (opt.trace && batch.size() != 1) throw std::invalid_argument("forward: traces need a single sequence");
    const std::size_t d = cfg_.d_model, H = cfg_.n_heads, dk = d / H;
    const PEConfig& pe = cfg_.pe;
    std::mt19937_64 local_rng(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
    std::mt19937_64& rng = opt.rng ? *opt.rng : local_rng;

    std::vector<std::size_t> ids, positions, segment, meta_rows;
    std::vector<std::uint8_t> is_meta;
    std::vector<std::size_t> masks_blocks;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch[s];
        if (seq.ids.empty()) throw std::invalid_argument("forward: empty sequence");
        if (seq.ids.size() > cfg_.max_context()) throw std::out_of_range("position out of range");
        const std::size_t base = ids.size();
        if (batch.size() > 1) masks_blocks.push_back(base);
        std::vector<std::uint8_t> local(seq.ids.size(), 0);
        for (std::size_t p : seq.meta_positions) {
            if (p >= seq.ids.size()) throw std::out_of_range("forward: meta position out of range");
            local[p] = 1;
        }
        for (std::size_t t = 0; t < seq.ids.size(); ++t) {
            if (seq.ids[t] >= cfg_.vocab_size) throw std::out_of_range("forward: token id outside vocabulary");
            ids.push_back(seq.ids[t]);
            positions.push_back(t);
            segment.push_back(s);
            is_meta.push_back(local[t]);
            if (local[t]) meta_rows.push_back(base + t);
        }
    }
    const std::size_t n = ids.size();

    MaskPair masks;
    masks.seq_len = n;
    masks.causal.assign(n * n, 0);
    masks.meta.assign(n * n, 0);
    masks.blocks = std::move(masks_blocks);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t start = i - positions[i];
        for (std::size_t j = start; j < n && segment[j] == segment[i]; ++j) {
            masks.causal[i * n + j] = j <= i;
            masks.meta[i * n + j] = is_meta[i] && is_meta[j];
        }
    }

    static const std::vector<std::uint8_t> kNone;
    Var x = ops::gather_rows(tape, tape.param(*tok_emb_), ids,
                             pe.zero_embed_at_meta ? std::span<const std::uint8_t>(is_meta) : kNone);
    double mult = 1.0;
    std::optional<RotaryTables<T>> rope;
    if (pe.mode == PEMode::APE) {
        Var p = ops::gather_rows(tape, tape.param(*pos_emb_), positions,
                                 pe.zero_at_meta ? std::span<const std::uint8_t>(is_meta) : kNone);
        x = ops::add(tape, x, p);
        if (pe.noise_sigma > 0.0) {
            Tensor<T> noise({n, d});
            std::size_t row = 0;
            for (const auto& seq : batch) {
                std::vector<double> rows(seq.ids.size() * d, 0.0);
                apply_ablations(rows, d, seq.meta_positions, pe, &rng);
                for (std::size_t i = 0; i < rows.size(); ++i) noise.values[row * d + i] = static_cast<T>(rows[i]);
                row += seq.ids.size();
            }
            x = ops::add(tape, x, tape.leaf(std::move(noise)));
        }
    } else if (pe.mode == PEMode::ROPE) {
        std::vector<double> angles;
        for (const auto& seq : batch) {
            auto a = rope_angle_table(seq.ids.size(), dk, pe, seq.meta_positions, &rng, &mult);
            angles.insert(angles.end(), a.begin(), a.end());
        }
        rope = RotaryTables<T>::from_angles(angles, dk / 2);
    }
    const RotaryTables<T>* rp = rope ? &*rope : nullptr;
    const AttentionOptions aopt{H, mult};
    const T eps = static_cast<T>(cfg_.ln_eps);

    AttentionTrace* tr = opt.trace;
    auto snapshot = [&](Var v) {
        const auto& vals = tape.value(v).values;
        tr->residual.emplace_back(vals.begin(), vals.end());
    };
    if (tr) {
        *tr = AttentionTrace{};
        tr->seq_len = n;
        tr->d_model = d;
        tr->meta_positions = meta_rows;
        tr->causal.resize(cfg_.n_layers);
        tr->meta.resize(cfg_.n_layers);
        snapshot(x);
    }
    auto norm = [&](Var v, Parameter<T>* g, Parameter<T>* b) {
        return ops::affine_cols(tape, ops::layer_norm(tape, v, eps), tape.param(*g), tape.param(*b));
    };
    auto drop = [&](Var v) { return opt.training ? ops::dropout(tape, v, cfg_.dropout, rng) : v; };

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        auto& L = layers_[l];
        Var h = norm(x, L.attn_ln_g, L.attn_ln_b);
        x = ops::add(tape, x, drop(causal_mha(tape, h, L.attn, aopt, rp, masks, tr ? &tr->causal[l] : nullptr)));
        if (cfg_.meta_attention) {
            h = norm(x, L.meta_ln_g, L.meta_ln_b);
            Var m = meta_attention(tape, h, L.meta, aopt, rp, masks, meta_rows, opt.kernel,
                                   tr ? &tr->meta[l] : nullptr);
            x = ops::add(tape, x, drop(m));
        }
        h = norm(x, L.mlp_ln_g, L.mlp_ln_b);
        Var b1 = tape.param(*L.b1), b2 = tape.param(*L.b2);
        Var f = ops::relu(tape, ops::linear(tape, h, tape.param(*L.w1), &b1));
        f = ops::linear(tape, f, tape.param(*L.w2), &b2);
        x = ops::add(tape, x, drop(f));
        if (tr) snapshot(x);
    }
    Var h = norm(x, lnf_g_, lnf_b_);
    if (!opt.logit_rows.empty()) h = ops::select_rows(tape, h, opt.logit_rows);
    Var bias = tape.param(*lm_bias_);
    return ops::linear_nt(tape, h, tape.param(*tok_emb_), &bias);
}

template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------------------
// Incremental inference

namespace {

template <typename T>
void norm_rows(std::size_t n, std::size_t d, const T* x, T* y, const Parameter<T>& g, const Parameter<T>& b,
               double eps) {
    kernels::layer_norm_rows(n, d, x, y, static_cast<T>(eps));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) y[i * d + j] = y[i * d + j] * g.value.values[j] + b.value.values[j];
}

template <typename T>
void affine_rows(std::size_t n, const T* x, const Parameter<T>& w, const Parameter<T>& b, T* y) {
    const std::size_t k = w.value.shape[0], m = w.value.shape[1];
    kernels::gemm(n, m, k, x, w.value.data(), y);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) y[i * m + j] += b.value.values[j];
}

template <typename T>
void rotate_rows(std::size_t n, std::size_t d, std::size_t heads, T* x, const std::vector<double>& angles) {
    const std::size_t dk = d / heads, half = dk / 2;
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
                const T c = static_cast<T>(std::cos(angles[t * half + i]));
                const T s = static_cast<T>(std::sin(angles[t * half + i]));
                T* p = x + t * d + h * dk + 2 * i;
                const T x0 = p[0], x1 = p[1];
                p[0] = x0 * c - x1 * s;
                p[1] = x0 * s + x1 * c;
            }
}

// One query row against cached keys at indices [0, nkeys); admissible(j) filters keys.
template <typename T, typename Admit>
bool attend_row(const T* q, const T* keys, const T* values, std::size_t nkeys, std::size_t d, std::size_t heads,
                T scale, Admit admissible, T* out, std::vector<T>& scratch) {
    const std::size_t dk = d / heads;
    scratch.resize(nkeys);
    bool any = false;
    for (std::size_t h = 0; h < heads; ++h) {
        const T* qh = q + h * dk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < nkeys; ++j) {
            if (!admissible(j)) {
                scratch[j] = -std::numeric_limits<T>::infinity();
                continue;
            }
            const T* kj = keys + j * d + h * dk;
            T s = 0;
            for (std::size_t c = 0; c < dk; ++c) s += qh[c] * kj[c];
            scratch[j] = s * scale;
            mx = std::max(mx, scratch[j]);
        }
        T* oh = out + h * dk;
        std::fill(oh, oh + dk, T(0));
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        any = true;
        T z = 0;
        for (std::size_t j = 0; j < nkeys; ++j) {
            scratch[j] = scratch[j] == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(scratch[j] - mx);
            z += scratch[j];
        }
        for (std::size_t j = 0; j < nkeys; ++j) {
            if (scratch[j] == T(0)) continue;
            const T a = scratch[j] / z;
            const T* vj = values + j * d + h * dk;
            for (std::size_t c = 0; c < dk; ++c) oh[c] += a * vj[c];
        }
    }
    return any;
}

}  // namespace

template <typename T>
InferenceSession<T>::InferenceSession(const Model<T>& model, MetaKernel kernel, std::uint64_t noise_seed,
                                      bool use_meta)
    : model_(model), kernel_(kernel), use_meta_(use_meta), cache_(model.config().n_layers), noise_rng_(noise_seed),
      noise_(0.0, std::max(model.config().pe.noise_sigma, 1e-300)) {
    const auto& cfg = model_.config();
    if (cfg.pe.mode == PEMode::ROPE)
        freqs_ = effective_frequencies(cfg.d_model / cfg.n_heads, cfg.pe, &logit_mult_);
}

template <typename T>
void InferenceSession<T>::positional_rows(std::size_t p0, std::size_t n, std::span<const std::uint8_t> meta,
                                          std::vector<double>& angles, std::vector<T>& ape) {
    const auto& cfg = model_.config();
    const auto& pe = cfg.pe;
    const std::size_t d = cfg.d_model;
    if (pe.mode == PEMode::ROPE) {
        const std::size_t half = freqs_.size();
        angles.assign(n * half, 0.0);
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t i = 0; i < half; ++i) {
                double a = static_cast<double>(p0 + t) * freqs_[i];
                if (pe.noise_sigma > 0.0) a += noise_(noise_rng_);
                angles[t * half + i] = (pe.zero_at_meta && meta[t]) ? 0.0 : a;
            }
    } else if (pe.mode == PEMode::APE) {
        ape.assign(n * d, T(0));
        const auto& table = model_.pos_emb()->value;
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j = 0; j < d; ++j) {
                double v = static_cast<double>(table.values[(p0 + t) * d + j]);
                if (pe.noise_sigma > 0.0) v += noise_(noise_rng_);
                ape[t * d + j] = (pe.zero_at_meta && meta[t]) ? T(0) : static_cast<T>(v);
            }
    }
}

template <typename T>
std::vector<T> InferenceSession<T>::feed(std::span<const std::size_t> ids, std::vector<T>* all_logits) {
    const auto& cfg = model_.config();
    const std::size_t n = ids.size(), d = cfg.d_model, H = cfg.n_heads, V = cfg.vocab_size;
    if (n == 0) throw std::invalid_argument("feed: no tokens");
    if (len_ + n > cfg.max_context()) throw std::length_error("context overflow");
    const std::size_t p0 = len_;
    std::vector<std::uint8_t> meta(n);
    for (std::size_t t = 0; t < n; ++t) {
        if (ids[t] >= V) throw std::out_of_range("feed: token id outside vocabulary");
        meta[t] = ids[t] == cfg.meta_id;
        is_meta_.push_back(meta[t]);
    }

    std::vector<T> x(n * d, T(0)), ape;
    std::vector<double> angles;
    positional_rows(p0, n, meta, angles, ape);
    const auto& emb = model_.tok_emb().value;
    for (std::size_t t = 0; t < n; ++t) {
        if (!(cfg.pe.zero_embed_at_meta && meta[t])) std::copy_n(emb.data() + ids[t] * d, d, x.data() + t * d);
        if (!ape.empty())
            for (std::size_t j = 0; j < d; ++j) x[t * d + j] += ape[t * d + j];
    }
    const bool rope = cfg.pe.mode == PEMode::ROPE;
    const T scale = static_cast<T>(logit_mult_ / std::sqrt(static_cast<double>(d / H)));
    std::vector<T> h(n * d), q(n * d), k(n * d), v(n * d), a(n * d), o(n * d), f1(n * 4 * d), scratch;

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& L = model_.layer(l);
        auto& C = cache_[l];

        norm_rows(n, d, x.data(), h.data(), *L.attn_ln_g, *L.attn_ln_b, cfg.ln_eps);
        affine_rows(n, h.data(), *L.attn.wq, *L.attn.bq, q.data());
        affine_rows(n, h.data(), *L.attn.wk, *L.attn.bk, k.data());
        affine_rows(n, h.data(), *L.attn.wv, *L.attn.bv, v.data());
        if (rope) {
            rotate_rows(n, d, H, q.data(), angles);
            rotate_rows(n, d, H, k.data(), angles);
        }
        C.k.insert(C.k.end(), k.begin(), k.end());
        C.v.insert(C.v.end(), v.begin(), v.end());
        for (std::size_t t = 0; t < n; ++t) {
            const std::size_t p = p0 + t;
            attend_row(q.data() + t * d, C.k.data(), C.v.data(), p + 1, d, H, scale,
                       [](std::size_t) { return true; }, a.data() + t * d, scratch);
        }
        affine_rows(n, a.data(), *L.attn.wo, *L.attn.bo, o.data());
        for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];

        if (cfg.meta_attention && use_meta_) {
            norm_rows(n, d, x.data(), h.data(), *L.meta_ln_g, *L.meta_ln_b, cfg.ln_eps);
            if (kernel_ == MetaKernel::Dense) {
                affine_rows(n, h.data(), *L.meta.wq, *L.meta.bq, q.data());
                affine_rows(n, h.data(), *L.meta.wk, *L.meta.bk, k.data());
                affine_rows(n, h.data(), *L.meta.wv, *L.meta.bv, v.data());
                if (rope) {
                    rotate_rows(n, d, H, q.data(), angles);
                    rotate_rows(n, d, H, k.data(), angles);
                }
                C.mk.insert(C.mk.end(), k.begin(), k.end());
                C.mv.insert(C.mv.end(), v.begin(), v.end());
                std::vector<std::uint8_t> nonempty(n, 0);
                for (std::size_t t = 0; t < n; ++t) {
                    const std::size_t p = p0 + t;
                    const bool qm = meta[t];
                    nonempty[t] = attend_row(
                        q.data() + t * d, C.mk.data(), C.mv.data(), p + 1, d, H, scale,
                        [&](std::size_t j) { return qm && is_meta_[j]; }, a.data() + t * d, scratch);
                }
                affine_rows(n, a.data(), *L.meta.wo, *L.meta.bo, o.data());
                for (std::size_t t = 0; t < n; ++t)
                    if (nonempty[t])
                        for (std::size_t j = 0; j < d; ++j) x[t * d + j] += o[t * d + j];
            } else {
                std::vector<std::size_t> rows;
                for (std::size_t t = 0; t < n; ++t)
                    if (meta[t]) rows.push_back(t);
                const std::size_t m = rows.size();
                if (m > 0) {
                    std::vector<T> hm(m * d), qm(m * d), km(m * d), vm(m * d), am(m * d), om(m * d);
                    std::vector<double> ang;
                    const std::size_t half = freqs_.size();
                    for (std::size_t r = 0; r < m; ++r) {
                        std::copy_n(h.data() + rows[r] * d, d, hm.data() + r * d);
                        if (rope) ang.insert(ang.end(), angles.begin() + rows[r] * half, angles.begin() + (rows[r] + 1) * half);
                    }
                    affine_rows(m, hm.data(), *L.meta.wq, *L.meta.bq, qm.data());
                    affine_rows(m, hm.data(), *L.meta.wk, *L.meta.bk, km.data());
                    affine_rows(m, hm.data(), *L.meta.wv, *L.meta.bv, vm.data());
                    if (rope) {
                        rotate_rows(m, d, H, qm.data(), ang);
                        rotate_rows(m, d, H, km.data(), ang);
                    }
                    const std::size_t before = C.mpos.size();
                    C.mk.insert(C.mk.end(), km.begin(), km.end());
                    C.mv.insert(C.mv.end(), vm.begin(), vm.end());
                    for (std::size_t r = 0; r < m; ++r) C.mpos.push_back(p0 + rows[r]);
                    for (std::size_t r = 0; r < m; ++r)
                        attend_row(qm.data() + r * d, C.mk.data(), C.mv.data(), before + r + 1, d, H, scale,
                                   [](std::size_t) { return true; }, am.data() + r * d, scratch);
                    affine_rows(m, am.data(), *L.meta.wo, *L.meta.bo, om.data());
                    for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t j = 0; j < d; ++j) x[rows[r] * d + j] += om[r * d + j];
                }
            }
        }

        norm_rows(n, d, x.data(), h.data(), *L.mlp_ln_g, *L.mlp_ln_b, cfg.ln_eps);
        affine_rows(n, h.data(), *L.w1, *L.b1, f1.data());
        for (auto& e : f1) e = e > T(0) ? e : T(0);
        affine_rows(n, f1.data(), *L.w2, *L.b2, o.data());
        for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];
    }
    len_ += n;

    const std::size_t first = all_logits ? 0 : n - 1, rows = n - first;
    std::vector<T> hf(rows * d), logits(rows * V);
    norm_rows(rows, d, x.data() + first * d, hf.data(), model_.lnf_g(), model_.lnf_b(), cfg.ln_eps);
    kernels::gemm_nt(rows, V, d, hf.data(), emb.data(), logits.data());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < V; ++j) logits[i * V + j] += model_.lm_bias().value.values[j];
    if (all_logits) *all_logits = logits;
    return std::vector<T>(logits.end() - static_cast<std::ptrdiff_t>(V), logits.end());
}

template class InferenceSession<float>;
template class InferenceSession<double>;

template <typename T>
std::vector<std::size_t> generate(const Model<T>& model, std::span<const std::size_t> prompt, std::size_t max_new,
                                  MetaKernel kernel, std::uint64_t noise_seed) {
    const auto& cfg = model.config();
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (prompt.size() + max_new > cfg.max_context()) throw std::length_error("context overflow");
    std::vector<std::size_t> out;
    if (max_new == 0) return out;
    InferenceSession<T> session(model, kernel, noise_seed);
    auto logits = session.feed(prompt);
    while (true) {
        const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (best == cfg.newline_id) break;
        out.push_back(best);
        if (out.size() == max_new) break;
        logits = session.feed(std::span<const std::size_t>(&best, 1));
    }
    return out;
}

template std::vector<std::size_t> generate(const Model<float>&, std::span<const std::size_t>, std::size_t,
                                           MetaKernel, std::uint64_t);
template std::vector<std::size_t> generate(const Model<double>&, std::span<const std::size_t>, std::size_t,
                                           MetaKernel, std::uint64_t);

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::pair<std::string, std::string>> config_fields(const ModelConfig& c) {
    const YarnParams y = c.pe.yarn.value_or(YarnParams{});
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    return {
        {"n_layers", std::to_string(c.n_layers)},
        {"n_heads", std::to_string(c.n_heads)},
        {"d_model", std::to_string(c.d_model)},
        {"block_size", std::to_string(c.block_size)},
        {"vocab_size", std::to_string(c.vocab_size)},
        {"pe_mode", to_string(c.pe.mode)},
        {"rope_base", fmt_double(c.pe.rope_base)},
        {"yarn", b(c.pe.yarn.has_value())},
        {"yarn_scale", fmt_double(y.scale)},
        {"yarn_original_max_seq_len", std::to_string(y.original_max_seq_len)},
        {"yarn_extrapolation_factor", fmt_double(y.extrapolation_factor)},
        {"yarn_attn_factor", fmt_double(y.attn_factor)},
        {"yarn_beta_fast", fmt_double(y.beta_fast)},
        {"yarn_beta_slow", fmt_double(y.beta_slow)},
        {"noise_sigma", fmt_double(c.pe.noise_sigma)},
        {"zero_at_meta", b(c.pe.zero_at_meta)},
        {"zero_embed_at_meta", b(c.pe.zero_embed_at_meta)},
        {"meta_fraction", fmt_double(c.meta_fraction)},
        {"dropout", fmt_double(c.dropout)},
        {"seed", std::to_string(c.seed)},
        {"meta_attention", b(c.meta_attention)},
        {"retarget_loss", b(c.retarget_loss)},
        {"meta_id", std::to_string(c.meta_id)},
        {"newline_id", std::to_string(c.newline_id)},
        {"ln_eps", fmt_double(c.ln_eps)},
    };
}

ModelConfig config_from_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
    ModelConfig c;
    YarnParams y;
    bool yarn = false;
    for (const auto& [k, v] : fields) {
        if (k == "n_layers") c.n_layers = parse_uint(v, k);
        else if (k == "n_heads") c.n_heads = parse_uint(v, k);
        else if (k == "d_model") c.d_model = parse_uint(v, k);
        else if (k == "block_size") c.block_size = parse_uint(v, k);
        else if (k == "vocab_size") c.vocab_size = parse_uint(v, k);
        else if (k == "pe_mode") c.pe.mode = pe_mode_from_string(v);
        else if (k == "rope_base") c.pe.rope_base = parse_double(v, k);
        else if (k == "yarn") yarn = parse_bool(v, k);
        else if (k == "yarn_scale") y.scale = parse_double(v, k);
        else if (k == "yarn_original_max_seq_len") y.original_max_seq_len = parse_uint(v, k);
        else if (k == "yarn_extrapolation_factor") y.extrapolation_factor = parse_double(v, k);
        else if (k == "yarn_attn_factor") y.attn_factor = parse_double(v, k);
        else if (k == "yarn_beta_fast") y.beta_fast = parse_double(v, k);
        else if (k == "yarn_beta_slow") y.beta_slow = parse_double(v, k);
        else if (k == "noise_sigma") c.pe.noise_sigma = parse_double(v, k);
        else if (k == "zero_at_meta") c.pe.zero_at_meta = parse_bool(v, k);
        else if (k == "zero_embed_at_meta") c.pe.zero_embed_at_meta = parse_bool(v, k);
        else if (k == "meta_fraction") c.meta_fraction = parse_double(v, k);
        else if (k == "dropout") c.dropout = parse_double(v, k);
        else if (k == "seed") c.seed = parse_uint(v, k);
        else if (k == "meta_attention") c.meta_attention = parse_bool(v, k);
        else if (k == "retarget_loss") c.retarget_loss = parse_bool(v, k);
        else if (k == "meta_id") c.meta_id = parse_uint(v, k);
        else if (k == "newline_id") c.newline_id = parse_uint(v, k);
        else if (k == "ln_eps") c.ln_eps = parse_double(v, k);
        else throw std::invalid_argument("unknown model config field: " + k);
    }
    if (yarn) c.pe.yarn = y;
    return c;
}

namespace {

constexpr const char* kMagic = "metatok-checkpoint 1";

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& values) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path.string());
    if constexpr (std::endian::native == std::endian::little) {
        f.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
    } else {
        for (T v : values) {
            char b[sizeof(T)];
            std::memcpy(b, &v, sizeof(T));
            std::reverse(b, b + sizeof(T));
            f.write(b, sizeof(T));
        }
    }
    if (!f) throw std::runtime_error("checkpoint: short write to " + path.string());
}

template <typename Src, typename T>
void read_raw_as(const std::filesystem::path& path, std::size_t count, std::vector<T>& out) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("checkpoint: missing file " + path.string());
    const auto bytes = static_cast<std::size_t>(f.tellg());
    if (bytes != count * sizeof(Src)) throw std::runtime_error("checkpoint: corrupt file " + path.string());
    f.seekg(0);
    std::vector<Src> raw(count);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw std::runtime_error("checkpoint: corrupt file " + path.string());
    if constexpr (std::endian::native != std::endian::little) {
        for (auto& v : raw) {
            char b[sizeof(Src)];
            std::memcpy(b, &v, sizeof(Src));
            std::reverse(b, b + sizeof(Src));
            std::memcpy(&v, b, sizeof(Src));
        }
    }
    out.resize(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(raw[i]);
}

struct Manifest {
    std::vector<std::pair<std::string, std::string>> config;
    std::size_t step = 0;
    struct Entry {
        std::string name, dtype, file;
        Shape shape;
    };
    std::vector<Entry> params;
    std::optional<std::size_t> adam_step;
    std::map<std::string, std::pair<std::string, std::string>> adam;
};

Shape parse_shape(const std::string& s) {
    Shape out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) out.push_back(parse_uint(part, "shape"));
    return out;
}

Manifest read_manifest(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.txt");
    if (!f) throw std::runtime_error("checkpoint: no manifest in " + dir.string());
    std::string line;
    if (!std::getline(f, line) || line != kMagic) throw std::runtime_error("checkpoint: corrupt manifest header");
    Manifest m;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "step") {
            std::string v;
            ls >> v;
            m.step = parse_uint(v, "step");
        } else if (kind == "config") {
            std::string k, v;
            ls >> k >> v;
            m.config.emplace_back(k, v);
        } else if (kind == "param") {
            Manifest::Entry e;
            std::string shape;
            ls >> e.name >> e.dtype >> shape >> e.file;
            if (e.file.empty()) throw std::runtime_error("checkpoint: corrupt manifest line: " + line);
            e.shape = parse_shape(shape);
            m.params.push_back(e);
        } else if (kind == "adam_step") {
            std::string v;
            ls >> v;
            m.adam_step = parse_uint(v, "adam_step");
        } else if (kind == "adam") {
            std::string name, fm, fv;
            ls >> name >> fm >> fv;
            m.adam[name] = {fm, fv};
        } else if (kind == "parameter_count") {
            continue;
        } else {
            throw std::runtime_error("checkpoint: unknown manifest entry: " + kind);
        }
    }
    return m;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, std::size_t step, const std::filesystem::path& dir,
                     const OptimizerState* opt) {
    std::filesystem::create_directories(dir);
    std::ofstream f(dir / "manifest.txt");
    if (!f) throw std::runtime_error("checkpoint: cannot write manifest in " + dir.string());
    f << kMagic << '\n' << "step " << step << '\n';
    for (const auto& [k, v] : config_fields(model.config())) f << "config " << k << ' ' << v << '\n';
    const auto& store = model.params();
    f << "parameter_count " << store.total_elements() << '\n';
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& p = store[i];
        std::string shape;
        for (std::size_t j = 0; j < p.value.shape.size(); ++j) shape += (j ? "x" : "") + std::to_string(p.value.shape[j]);
        const std::string file = p.name + ".bin";
        if (!all_finite(p.value.values)) throw NumericError("checkpoint: non-finite parameter " + p.name);
        write_raw(dir / file, p.value.values);
        f << "param " << p.name << ' ' << dtype_name<T>() << ' ' << shape << ' ' << file << '\n';
    }
    if (opt) {
        if (opt->m.size() != store.size() || opt->v.size() != store.size())
            throw std::invalid_argument("checkpoint: optimizer state does not match parameters");
        f << "adam_step " << opt->step << '\n';
        for (std::size_t i = 0; i < store.size(); ++i) {
            const std::string fm = store[i].name + ".adam_m.bin", fv = store[i].name + ".adam_v.bin";
            write_raw(dir / fm, opt->m[i]);
            write_raw(dir / fv, opt->v[i]);
            f << "adam " << store[i].name << ' ' << fm << ' ' << fv << '\n';
        }
    }
    if (!f) throw std::runtime_error("checkpoint: failed writing manifest");
}

ModelConfig read_checkpoint_config(const std::filesystem::path& dir, std::size_t* step) {
    auto m = read_manifest(dir);
    if (step) *step = m.step;
    return config_from_fields(m.config);
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& dir, std::size_t* step, OptimizerState* opt) {
    const auto man = read_manifest(dir);
    Model<T> model(config_from_fields(man.config));
    auto& store = model.params();
    if (man.params.size() != store.size())
        throw ShapeError("checkpoint: manifest lists " + std::to_string(man.params.size()) + " parameters, model has " +
                         std::to_string(store.size()));
    for (const auto& e : man.params) {
        if (!store.contains(e.name)) throw ShapeError("checkpoint: unexpected parameter " + e.name);
        auto& p = store.get(e.name);
        if (e.shape != p.value.shape)
            throw ShapeError("checkpoint: shape mismatch for " + e.name + ": file " + shape_str(e.shape) +
                             ", config " + shape_str(p.value.shape));
        if (e.dtype == "f32") read_raw_as<float>(dir / e.file, p.value.size(), p.value.values);
        else if (e.dtype == "f64") read_raw_as<double>(dir / e.file, p.value.size(), p.value.values);
        else throw std::runtime_error("checkpoint: unknown dtype " + e.dtype);
        if (!all_finite(p.value.values)) throw NumericError("checkpoint: non-finite values in " + e.name);
    }
    if (step) *step = man.step;
    if (opt) {
        *opt = OptimizerState{};
        if (man.adam_step) {
            opt->step = *man.adam_step;
            for (std::size_t i = 0; i < store.size(); ++i) {
                auto it = man.adam.find(store[i].name);
                if (it == man.adam.end()) throw std::runtime_error("checkpoint: missing optimizer state for " + store[i].name);
                opt->m.emplace_back();
                opt->v.emplace_back();
                read_raw_as<float>(dir / it->second.first, store[i].value.size(), opt->m.back());
                read_raw_as<float>(dir / it->second.second, store[i].value.size(), opt->v.back());
            }
        }
    }
    return model;
}

template void save_checkpoint(const Model<float>&, std::size_t, const std::filesystem::path&, const OptimizerState*);
template void save_checkpoint(const Model<double>&, std::size_t, const std::filesystem::path&, const OptimizerState*);
template Model<float> load_checkpoint(const std::filesystem::path&, std::size_t*, OptimizerState*);
template Model<double> load_checkpoint(const std::filesystem::path&, std::size_t*, OptimizerState*);

}  // namespace metatok
