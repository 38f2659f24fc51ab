// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
// Usage: acceptance [criterion numbers...]   (default: all twelve)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metatok/ablation.hpp"
#include "metatok/attention.hpp"
#include "metatok/commands.hpp"
#include "metatok/corpus.hpp"
#include "metatok/grad_check.hpp"
#include "metatok/model.hpp"
#include "metatok/position.hpp"
#include "metatok/probes.hpp"
#include "metatok/tasks.hpp"
#include "metatok/train.hpp"

using namespace metatok;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    std::ostringstream o;
    o << v;
    return o.str();
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

const Vocab& vocab() {
    static const Vocab v = Vocab::build(vocab_corpus());
    return v;
}

// ---------------------------------------------------------------------------
// Small double-precision building blocks

struct Block {
    ParameterStore<double> store;
    AttentionWeights<double> w;
    Block(std::size_t d, std::mt19937_64& rng) {
        std::normal_distribution<double> nd(0.0, 0.5);
        auto mat = [&](const char* name, std::size_t r, std::size_t c) {
            Tensor<double> t({r, c});
            for (auto& v : t.values) v = nd(rng);
            return &store.add(name, t, true);
        };
        w.wq = mat("wq", d, d), w.bq = mat("bq", 1, d);
        w.wk = mat("wk", d, d), w.bk = mat("bk", 1, d);
        w.wv = mat("wv", d, d), w.bv = mat("bv", 1, d);
        w.wo = mat("wo", d, d), w.bo = mat("bo", 1, d);
        for (auto* b : {w.bq, w.bk, w.bv, w.bo}) b->value.shape = {d};
    }
    std::vector<Parameter<double>*> params() {
        std::vector<Parameter<double>*> out;
        for (std::size_t i = 0; i < store.size(); ++i) out.push_back(&store[i]);
        return out;
    }
};

Tensor<double> randn(std::size_t r, std::size_t c, std::mt19937_64& rng, double sigma = 1.0) {
    std::normal_distribution<double> nd(0.0, sigma);
    Tensor<double> t({r, c});
    for (auto& v : t.values) v = nd(rng);
    return t;
}

std::vector<double> affine(const std::vector<double>& x, std::size_t n, std::size_t k, const Parameter<double>& w,
                           const Parameter<double>& b) {
    const std::size_t m = w.value.cols();
    std::vector<double> y(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = b.value.values[j];
            for (std::size_t p = 0; p < k; ++p) s += x[i * k + p] * w.value.values[p * m + j];
            y[i * m + j] = s;
        }
    return y;
}

// Enumerates admissible keys per row and evaluates attention directly; rows
// without admissible keys are zero after the output projection.
std::vector<double> reference_attention(const Tensor<double>& x, const Block& b, std::size_t heads,
                                        const std::function<bool(std::size_t, std::size_t)>& admissible,
                                        const std::vector<double>* angles) {
    const std::size_t n = x.rows(), d = x.cols(), dk = d / heads;
    auto q = affine(x.values, n, d, *b.w.wq, *b.w.bq);
    auto k = affine(x.values, n, d, *b.w.wk, *b.w.bk);
    auto v = affine(x.values, n, d, *b.w.wv, *b.w.bv);
    if (angles)
        for (auto* m : {&q, &k})
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < dk / 2; ++i) {
                        const double a = (*angles)[t * (dk / 2) + i];
                        double& x0 = (*m)[t * d + h * dk + 2 * i];
                        double& x1 = (*m)[t * d + h * dk + 2 * i + 1];
                        const double r0 = x0 * std::cos(a) - x1 * std::sin(a);
                        const double r1 = x0 * std::sin(a) + x1 * std::cos(a);
                        x0 = r0;
                        x1 = r1;
                    }
    std::vector<double> attn(n * d, 0.0);
    std::vector<int> empty(n, 1);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::size_t> keys;
            for (std::size_t j = 0; j < n; ++j)
                if (admissible(i, j)) keys.push_back(j);
            if (keys.empty()) continue;
            empty[i] = 0;
            std::vector<double> s;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j : keys) {
                double dot = 0;
                for (std::size_t c = 0; c < dk; ++c) dot += q[i * d + h * dk + c] * k[j * d + h * dk + c];
                s.push_back(dot / std::sqrt(static_cast<double>(dk)));
                mx = std::max(mx, s.back());
            }
            double z = 0;
            for (double& e : s) z += (e = std::exp(e - mx));
            for (std::size_t r = 0; r < keys.size(); ++r)
                for (std::size_t c = 0; c < dk; ++c) attn[i * d + h * dk + c] += s[r] / z * v[keys[r] * d + h * dk + c];
        }
    auto out = affine(attn, n, d, *b.w.wo, *b.w.bo);
    for (std::size_t i = 0; i < n; ++i)
        if (empty[i]) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * d), d, 0.0);
    return out;
}

template <typename T>
void jitter(Model<T>& m, std::uint64_t seed, double sigma = 0.3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, sigma);
    auto& s = m.params();
    for (std::size_t i = 0; i < s.size(); ++i)
        for (auto& v : s[i].value.values) v += static_cast<T>(nd(rng));
}

std::vector<std::size_t> random_ids(std::size_t n, std::size_t vocab_size, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> u(3, vocab_size - 1);
    std::vector<std::size_t> ids(n);
    for (auto& v : ids) v = u(rng);
    return ids;
}

RotaryTables<double> rotary(std::size_t n, std::size_t dk, std::vector<double>* angles_out = nullptr) {
    PEConfig pe;
    auto angles = rope_angle_table(n, dk, pe, {}, nullptr);
    if (angles_out) *angles_out = angles;
    return RotaryTables<double>::from_angles(angles, dk / 2);
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
    const auto t0 = Clock::now();
    const std::size_t n = 16, d = 64, heads = 4;
    std::mt19937_64 rng(101);
    double worst_attn = 0, worst_meta = 0, worst_mlp = 0, worst_model = 0;

    Block b(d, rng);
    for (auto& p : b.params())
        for (auto& v : p->value.values) v *= 0.25;
    Parameter<double> x("x", randn(n, d, rng), false);
    std::vector<double> angles;
    const auto rope = rotary(n, d / heads, &angles);
    const std::vector<std::size_t> meta{2, 5, 6, 11, 15};
    const auto masks = build_masks(n, meta);
    auto params = b.params();
    params.push_back(&x);
    // scalar loss: block output projected on a fixed random direction
    const auto r = randn(d, 1, rng);
    auto project = [&](Tape<double>& t, Var y) { return ops::sum(t, ops::linear(t, y, t.leaf(r))); };
    const double h = 1e-3;
    worst_attn = grad_check([&](Tape<double>& t) {
        return project(t, causal_mha(t, t.param(x), b.w, {heads, 1.0}, &rope, masks));
    }, params, h, 1).max_rel_error;
    for (auto kernel : {MetaKernel::Dense, MetaKernel::Compact})
        worst_meta = std::max(worst_meta, grad_check([&](Tape<double>& t) {
            return project(t, meta_attention(t, t.param(x), b.w, {heads, 1.0}, &rope, masks, meta, kernel));
        }, params, h, 2).max_rel_error);

    Parameter<double> w1("w1", randn(d, 4 * d, rng, 0.2), true), b1("b1", randn(1, 4 * d, rng, 0.2), false);
    Parameter<double> w2("w2", randn(4 * d, d, rng, 0.2), true), b2("b2", randn(1, d, rng, 0.2), false);
    b1.value.shape = {4 * d};
    b2.value.shape = {d};
    worst_mlp = grad_check([&](Tape<double>& t) {
        Var vb1 = t.param(b1), vb2 = t.param(b2);
        Var hid = ops::relu(t, ops::linear(t, t.param(x), t.param(w1), &vb1));
        return project(t, ops::linear(t, hid, t.param(w2), &vb2));
    }, {&w1, &b1, &w2, &b2, &x}, h, 3).max_rel_error;

    for (auto mode : {PEMode::ROPE, PEMode::APE}) {
        ModelConfig c;
        c.n_layers = 2;
        c.n_heads = heads;
        c.d_model = d;
        c.block_size = n;
        c.vocab_size = 32;
        c.pe.mode = mode;
        c.seed = 9;
        Model<double> m(c);
        jitter(m, 10, 0.05);
        auto ids = random_ids(n, c.vocab_size, rng);
        for (auto p : meta) ids[p] = c.meta_id;
        std::vector<Parameter<double>*> mp;
        for (std::size_t i = 0; i < m.params().size(); ++i) mp.push_back(&m.params()[i]);
        worst_model = std::max(worst_model, grad_check([&](Tape<double>& t) {
            return lm_loss(t, m.forward(t, ids, meta), ids, meta);
        }, mp, h, 4, 24).max_rel_error);
    }
    const double secs = seconds_since(t0);
    const double worst = std::max({worst_attn, worst_meta, worst_mlp, worst_model});
    return {worst < 1e-5 && secs < 60,
            "max rel error attention=" + fmt(worst_attn) + " meta=" + fmt(worst_meta) + " mlp=" + fmt(worst_mlp) +
                " model=" + fmt(worst_model) + ", " + fmt(secs) + " s"};
}

Outcome mask_brute_force() {
    std::mt19937_64 rng(202);
    const std::size_t d = 8, heads = 2;
    double worst = 0;
    std::size_t subsets = 0, nonzero_rows = 0;
    for (std::size_t n = 1; n <= 8; ++n) {
        Block b(d, rng);
        const auto x = randn(n, d, rng);
        std::vector<double> angles;
        const auto rope = rotary(n, d / heads, &angles);
        for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
            std::vector<std::size_t> meta;
            for (std::size_t i = 0; i < n; ++i)
                if (mask >> i & 1u) meta.push_back(i);
            auto is_meta = [&](std::size_t i) { return (mask >> i & 1u) != 0; };
            const auto masks = build_masks(n, meta);
            for (const bool use_rope : {false, true}) {
                const auto ref = reference_attention(x, b, heads, [&](std::size_t i, std::size_t j) {
                    return j <= i && is_meta(i) && is_meta(j);
                }, use_rope ? &angles : nullptr);
                for (auto kernel : {MetaKernel::Dense, MetaKernel::Compact}) {
                    Tape<double> tape;
                    const auto y = tape.value(meta_attention(tape, tape.leaf(x), b.w, {heads, 1.0},
                                                             use_rope ? &rope : nullptr, masks, meta, kernel)).values;
                    worst = std::max(worst, max_abs_diff(y, ref));
                    for (std::size_t i = 0; i < n; ++i)
                        if (!is_meta(i))
                            for (std::size_t c = 0; c < d; ++c)
                                if (y[i * d + c] != 0.0) ++nonzero_rows;
                }
            }
            ++subsets;
        }
    }
    return {worst < 1e-9 && nonzero_rows == 0,
            std::to_string(subsets) + " subsets, max diff " + fmt(worst) + ", nonzero non-meta entries " +
                std::to_string(nonzero_rows)};
}

Outcome degeneracy() {
    std::mt19937_64 rng(303);
    double worst_all = 0, worst_k0 = 0;
    const std::size_t d = 16, heads = 4;
    for (std::size_t n = 1; n <= 12; ++n) {
        Block b(d, rng);
        const auto x = randn(n, d, rng);
        const auto rope = rotary(n, d / heads);
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        const auto masks = build_masks(n, all);
        for (const bool use_rope : {false, true})
            for (auto kernel : {MetaKernel::Dense, MetaKernel::Compact}) {
                Tape<double> tape;
                const auto* r = use_rope ? &rope : nullptr;
                const auto m = tape.value(meta_attention(tape, tape.leaf(x), b.w, {heads, 1.0}, r, masks, all, kernel)).values;
                const auto c = tape.value(causal_mha(tape, tape.leaf(x), b.w, {heads, 1.0}, r, masks)).values;
                worst_all = std::max(worst_all, max_abs_diff(m, c));
            }
    }
    for (auto mode : {PEMode::ROPE, PEMode::APE, PEMode::NOPE}) {
        ModelConfig c;
        c.n_layers = 2;
        c.n_heads = 2;
        c.d_model = 16;
        c.block_size = 32;
        c.vocab_size = 40;
        c.pe.mode = mode;
        c.meta_fraction = 0.0;
        Model<double> with(c);
        jitter(with, 11);
        c.meta_attention = false;
        Model<double> plain(c);
        for (std::size_t i = 0; i < plain.params().size(); ++i) {
            auto& p = plain.params()[i];
            p.value = with.params().get(p.name).value;
        }
        for (int trial = 0; trial < 10; ++trial) {
            const auto ids = random_ids(1 + trial * 3, c.vocab_size, rng);
            Tape<double> t1, t2;
            const auto a = t1.value(with.forward(t1, ids, {})).values;
            const auto p = t2.value(plain.forward(t2, ids, {})).values;
            worst_k0 = std::max(worst_k0, max_abs_diff(a, p));
        }
    }
    return {worst_all < 1e-9 && worst_k0 < 1e-9,
            "all-meta vs causal " + fmt(worst_all) + ", k=0 vs baseline " + fmt(worst_k0)};
}

Outcome entropy_suite() {
    std::mt19937_64 rng(404);
    const std::vector<double> grid{0.1, 0.5, 1, 2, 5};
    std::size_t strict = 0, monotone = 0, bound = 0, checked = 0;
    double worst_h = 0;
    for (std::size_t n : {2u, 8u, 64u}) {
        const auto r = theorem41_numeric(n, grid, 1000, rng);
        strict += r.strict_violations;
        monotone += r.monotone_violations;
        bound += r.bound_violations;
        checked += r.bound_checked;
        worst_h = std::max(worst_h, r.max_entropy_violation);
    }
    std::normal_distribution<double> nd;
    double dev = 0;
    for (std::size_t n : {2u, 8u, 64u})
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> logits(n);
            for (auto& v : logits) v = 2.0 * nd(rng);
            const auto idx = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
            dev = std::max(dev, cov_identity_check(logits, idx).max_deviation);
            dev = std::max(dev, cov_identity_check(logits, (idx + 1) % n).max_deviation);
        }
    return {strict == 0 && monotone == 0 && bound == 0 && checked > 0 && dev < 1e-6,
            "strict " + std::to_string(strict) + ", monotone " + std::to_string(monotone) + ", bound " +
                std::to_string(bound) + "/" + std::to_string(checked) + ", max entropy violation " + fmt(worst_h) +
                ", covariance deviation " + fmt(dev)};
}

Outcome loss_exclusion() {
    std::mt19937_64 rng(505);
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.block_size = 64;
    c.vocab_size = 30;
    Model<double> m(c);
    jitter(m, 12);
    std::size_t rows_checked = 0, nonzero = 0, moved = 0;
    std::uniform_int_distribution<std::size_t> len(3, 40), count(1, 3);
    std::bernoulli_distribution coin(0.25);
    std::normal_distribution<double> nd(0.0, 5.0);
    for (int batch = 0; batch < 100; ++batch) {
        std::vector<Sequence> seqs;
        const std::size_t k = count(rng);
        for (std::size_t s = 0; s < k; ++s) {
            auto ids = random_ids(len(rng), c.vocab_size, rng);
            for (std::size_t t = 0; t < ids.size(); ++t)
                if (coin(rng) || t == 1) ids[t] = c.meta_id;
            ids.back() = 3;  // at least one real target
            seqs.push_back({ids, meta_positions_of(ids, c.meta_id)});
        }
        for (const auto& s : seqs) {
            Tape<double> tape;
            Var logits = m.forward(tape, s.ids, s.meta_positions);
            Var loss = lm_loss(tape, logits, s.ids, s.meta_positions);
            tape.backward(loss);
            const auto& g = tape.grad(logits);
            auto x = tape.value(logits);
            const double base = tape.value(loss)[0];
            std::vector<std::size_t> excluded;
            for (std::size_t t = 0; t + 1 < s.ids.size(); ++t)
                if (s.ids[t + 1] == c.meta_id) excluded.push_back(t);
            for (std::size_t t : excluded) {
                ++rows_checked;
                for (std::size_t v = 0; v < c.vocab_size; ++v) {
                    if (g[t * c.vocab_size + v] != 0.0) ++nonzero;
                    x.values[t * c.vocab_size + v] += nd(rng);
                }
            }
            Tape<double> t2;
            if (t2.value(lm_loss(t2, t2.leaf(x), s.ids, s.meta_positions))[0] != base) ++moved;
        }
    }
    return {rows_checked > 0 && nonzero == 0 && moved == 0,
            std::to_string(rows_checked) + " meta-target rows, nonzero gradients " + std::to_string(nonzero) +
                ", perturbations that moved the loss " + std::to_string(moved)};
}

Outcome generator_oracle() {
    std::size_t total = 0, disagree = 0, roundtrip_bad = 0;
    const auto dir = fs::temp_directory_path() / "metatok_acceptance_data";
    fs::create_directories(dir);
    for (auto task : kAllTasks)
        for (int phase = 1; phase <= 5; ++phase) {
            std::mt19937_64 rng(1000 + 10 * static_cast<int>(task) + phase);
            const auto data = make_dataset(task, phase, 10000, rng);
            for (const auto& inst : data) {
                ++total;
                if (oracle(inst) != inst.answer) ++disagree;
            }
            const auto path = dir / (to_string(task) + std::to_string(phase) + ".jsonl");
            write_dataset(data, path);
            const auto back = read_dataset(path);
            if (back != data) ++roundtrip_bad;
            fs::remove(path);
        }
    fs::remove_all(dir);
    return {total == 200000 && disagree == 0 && roundtrip_bad == 0,
            std::to_string(total) + " instances, oracle disagreements " + std::to_string(disagree) +
                ", lossy roundtrips " + std::to_string(roundtrip_bad)};
}

Outcome rope_yarn() {
    std::mt19937_64 rng(707);
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<int> pos(0, 4000);
    auto randv = [&](std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = nd(rng);
        return v;
    };
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    };
    double norm_err = 0, offset_err = 0;
    for (const double scale : {0.0, 4.0, 8.0}) {
        PEConfig cfg;
        if (scale > 0) cfg.yarn = yarn_preset(scale);
        for (int trial = 0; trial < 200; ++trial) {
            const auto q = randv(64), k = randv(64);
            const int i = pos(rng), j = pos(rng), s = pos(rng);
            const auto qi = rope_apply(q, i, cfg), kj = rope_apply(k, j, cfg);
            norm_err = std::max(norm_err, std::abs(std::sqrt(dot(qi, qi)) - std::sqrt(dot(q, q))));
            const auto qs = rope_apply(q, i + s, cfg), ks = rope_apply(k, j + s, cfg);
            offset_err = std::max(offset_err, std::abs(dot(qi, kj) - dot(qs, ks)));
        }
    }
    const auto f = rope_frequencies(64, 10000.0);
    YarnParams one;
    one.scale = 1.0;
    const auto adj = yarn_adjust(f, one);
    const bool identity = std::all_of(adj.factors.begin(), adj.factors.end(), [](double v) { return v == 1.0; }) &&
                          adj.logit_multiplier == 1.0;

    bool presets_ok = true;
    std::string logits_detail;
    for (const double scale : {4.0, 8.0}) {
        const auto p = yarn_preset(scale);
        presets_ok = presets_ok && p.scale == scale && p.beta_fast == 32.0 && p.beta_slow == 1.0;
        ModelConfig c;
        c.n_layers = 1;
        c.n_heads = 2;
        c.d_model = 32;
        c.block_size = p.original_max_seq_len;
        c.vocab_size = 50;
        c.pe.yarn = p;
        Model<float> m(c);
        const std::size_t n = 2 * p.original_max_seq_len;
        auto ids = random_ids(n, c.vocab_size, rng);
        std::vector<std::size_t> meta;
        for (std::size_t t = 7; t < n; t += 97) ids[t] = c.meta_id, meta.push_back(t);
        Tape<float> tape;
        const auto& logits = tape.value(m.forward(tape, ids, meta)).values;
        const bool finite = std::all_of(logits.begin(), logits.end(), [](float v) { return std::isfinite(v); });
        presets_ok = presets_ok && finite && logits.size() == n * c.vocab_size;
        logits_detail += " scale " + fmt(scale) + (finite ? " finite" : " NON-FINITE") + " at T=" + std::to_string(n);
    }
    return {norm_err < 1e-9 && offset_err < 1e-9 && identity && presets_ok,
            "norm err " + fmt(norm_err) + ", offset err " + fmt(offset_err) + ", scale-1 identity " +
                (identity ? "yes" : "no") + "," + logits_detail};
}

// ---------------------------------------------------------------------------
// Training-based criteria share the parity models

struct ParityRun {
    std::unique_ptr<Model<float>> model;
    EvalReport report;
    double seconds = 0;
};

TrainConfig desk_train(std::uint64_t seed, std::size_t steps) {
    TrainConfig t;
    t.lr = 1e-3;
    t.min_lr = 1e-4;
    t.warmup_iters = 100;
    t.max_iters = steps;
    t.batch_size = 4;
    t.eval_interval = 500;
    t.eval_batches = 4;
    t.log_interval = 100;
    t.seed = seed;
    return t;
}

ModelConfig desk_model(std::uint64_t seed, bool meta) {
    ModelConfig c;  // default 4-layer configuration
    c.vocab_size = vocab().size();
    c.meta_id = vocab().meta_id();
    c.newline_id = vocab().newline_id();
    c.meta_attention = meta;
    c.meta_fraction = meta ? c.meta_fraction : 0.0;
    c.seed = seed;
    return c;
}

const std::size_t kParityTrainLen = 300;  // longest phase-2 prompt
const std::vector<std::size_t> kParityBins = {150, 300, 600};

std::vector<TaskInstance> parity_test() {
    std::vector<TaskInstance> test;
    for (int phase : {1, 2, 3}) {
        auto part = generate_split(Task::Parity, phase, 200, 77, 1);
        test.insert(test.end(), part.begin(), part.end());
    }
    return test;
}

std::unique_ptr<Model<float>> g_parity_model;  // first meta seed, reused by later criteria

Outcome parity_directional() {
    const auto t0 = Clock::now();
    const std::vector<std::vector<TaskInstance>> phases = {generate_split(Task::Parity, 1, 2000, 77, 0),
                                                           generate_split(Task::Parity, 2, 2000, 77, 0)};
    const auto test = parity_test();
    std::vector<std::vector<double>> acc(2, std::vector<double>(kParityBins.size(), 0.0));
    std::vector<std::size_t> counts(kParityBins.size(), 0);
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    for (std::uint64_t seed : seeds)
        for (int meta = 1; meta >= 0; --meta) {
            auto model = std::make_unique<Model<float>>(desk_model(seed, meta == 1));
            const auto r0 = Clock::now();
            finetune(*model, vocab(), phases, desk_train(seed, 2000));
            const auto rep = evaluate_model(*model, vocab(), test, kParityBins);
            for (std::size_t b = 0; b < rep.bins.size(); ++b) {
                acc[static_cast<std::size_t>(meta)][b] += rep.bins[b].token_accuracy / seeds.size();
                counts[b] = rep.bins[b].count;
            }
            std::cout << "  parity seed " << seed << (meta ? " meta" : " baseline") << ": ";
            for (const auto& b : rep.bins) std::cout << "(" << b.lo << "," << b.hi << "] " << b.token_accuracy << "% ";
            std::cout << "[" << seconds_since(r0) << " s]\n" << std::flush;
            if (meta && !g_parity_model) g_parity_model = std::move(model);
        }
    const double secs = seconds_since(t0);
    bool beats = true;
    double at_train = 0;
    std::string detail;
    for (std::size_t b = 0; b < kParityBins.size(); ++b) {
        if (counts[b] == 0) continue;
        beats = beats && acc[1][b] > acc[0][b];
        if (kParityBins[b] == kParityTrainLen) at_train = acc[1][b];
        detail += "bin<=" + std::to_string(kParityBins[b]) + " meta " + fmt(acc[1][b]) + "% vs " + fmt(acc[0][b]) + "%; ";
    }
    return {beats && at_train >= 95.0 && secs <= 1800,
            detail + "train-length bin " + fmt(at_train) + "%, " + fmt(secs) + " s"};
}

Model<float>& parity_model() {
    if (!g_parity_model) {
        g_parity_model = std::make_unique<Model<float>>(desk_model(1, true));
        finetune(*g_parity_model, vocab(), {generate_split(Task::Parity, 1, 500, 77, 0)}, desk_train(1, 200));
    }
    return *g_parity_model;
}

Outcome ablation_harness() {
    auto& model = parity_model();
    const auto test = parity_test();
    const AblationResult ab = run_ablation(model, vocab(), test, kParityBins, std::vector<AblationMode>(
                                               std::begin(kAllAblations), std::end(kAllAblations)));
    const auto table = ablation_csv(ab);
    std::istringstream in(table);
    std::string header, row;
    std::getline(in, header);
    bool rows_ok = true;
    std::size_t rows = 0;
    while (std::getline(in, row)) {
        ++rows;
        rows_ok = rows_ok && row.rfind(ab.label + " (", 0) == 0 && std::count(row.begin(), row.end(), ',') == 4;
    }
    const bool table_ok = header == "Model (Eval Len),Full,No Pos,No Embed,Neither" && rows > 0 && rows_ok;

    // no-pos touches only meta rows, bit for bit
    std::mt19937_64 rng(909);
    std::size_t off_meta_diffs = 0, meta_rows_changed = 0;
    for (auto mode : {PEMode::APE, PEMode::ROPE})
        for (double sigma : {0.0, 0.5}) {
            ModelConfig c = model.config();
            c.pe.mode = mode;
            c.pe.noise_sigma = sigma;
            c.block_size = 64;
            Model<float> base(c);
            auto nopos = clone_with(base, ablated(c, AblationMode::NoPos));
            for (int trial = 0; trial < 20; ++trial) {
                std::vector<std::size_t> meta;
                std::bernoulli_distribution coin(0.3);
                for (std::size_t t = 0; t < 64; ++t)
                    if (coin(rng)) meta.push_back(t);
                const auto a = positional_rows(base, 64, meta, 5);
                const auto b = positional_rows(*nopos, 64, meta, 5);
                const std::size_t width = a.size() / 64;
                for (std::size_t t = 0; t < 64; ++t) {
                    const bool is_meta = std::binary_search(meta.begin(), meta.end(), t);
                    const bool same = std::memcmp(a.data() + t * width, b.data() + t * width, width * sizeof(double)) == 0;
                    if (!is_meta && !same) ++off_meta_diffs;
                    if (is_meta && !same) ++meta_rows_changed;
                }
            }
        }

    const std::vector<double> grid(std::begin(kNoiseGrid), std::end(kNoiseGrid));
    const NoiseSweep ns = noise_sweep(model, vocab(), test, kParityBins, grid);
    const bool sweep_ok = ns.points.size() == 5 && std::isfinite(ns.spearman) && std::isfinite(ns.drop);
    std::cout << table << noise_csv(ns) << std::flush;
    return {table_ok && off_meta_diffs == 0 && meta_rows_changed > 0 && sweep_ok,
            std::string("table ") + (table_ok ? "ok" : "malformed") + ", off-meta PE diffs " +
                std::to_string(off_meta_diffs) + ", meta rows zeroed " + std::to_string(meta_rows_changed) +
                ", noise sweep monotone " + (ns.monotone_nonincreasing ? "yes" : "no") + " rises " +
                std::to_string(ns.rises) + " spearman " + fmt(ns.spearman) + " drop " + fmt(ns.drop)};
}

Outcome rate_distortion() {
    const auto t0 = Clock::now();
    Model<float> model(desk_model(5, true));
    finetune(model, vocab(), {generate_split(Task::ListRecall, 1, 2000, 55, 0)}, desk_train(5, 4000));
    const auto train_s = seconds_since(t0);
    const auto s0 = Clock::now();
    const auto set = make_probe_set(model, vocab(), generate_split(Task::ListRecall, 1, 1000, 55, 1));
    const std::vector<double> betas(std::begin(kBetaGrid), std::end(kBetaGrid));
    const RDSweep s = rd_sweep(set, betas, VibOptions{});
    const double sweep_s = seconds_since(s0);
    std::cout << rd_csv(s) << std::flush;
    return {s.meta.size() == 7 && s.plain.size() == 7 && s.meta_rate_monotone && s.plain_rate_monotone &&
                s.dominates() && sweep_s <= 600,
            "points " + std::to_string(s.meta.size()) + "/" + std::to_string(s.plain.size()) + ", rate monotone meta " +
                (s.meta_rate_monotone ? "yes" : "no") + " plain " + (s.plain_rate_monotone ? "yes" : "no") +
                ", crossings " + std::to_string(s.dominance_violations) + ", sweep " + fmt(sweep_s) +
                " s (probe model trained in " + fmt(train_s) + " s)"};
}

Outcome bias_expressivity_check() {
    std::mt19937_64 rng(1111);
    double max_meta = 0, min_abs = 1e300, min_rel = 1e300;
    std::size_t inconclusive = 0, total = 0;
    for (std::size_t t = 2; t <= 6; ++t)
        for (int trial = 0; trial < 50; ++trial) {
            const auto r = bias_expressivity(t, 2, rng);
            ++total;
            if (r.inconclusive) {
                ++inconclusive;
                continue;
            }
            max_meta = std::max(max_meta, r.residual_meta);
            min_abs = std::min(min_abs, r.residual_abs);
            min_rel = std::min(min_rel, r.residual_rel);
        }
    return {inconclusive == 0 && max_meta < 1e-8 && min_abs > 0.1 && min_rel > 0.1,
            std::to_string(total) + " instances, max meta residual " + fmt(max_meta) + ", min abs " + fmt(min_abs) +
                ", min rel " + fmt(min_rel)};
}

Outcome inference_bench() {
    auto& model = parity_model();
    std::vector<std::vector<std::size_t>> prompts;
    for (const auto& inst : generate_split(Task::Parity, 2, 8, 77, 1)) {
        const auto ex = make_example(vocab(), inst);
        prompts.emplace_back(ex.ids.begin(), ex.ids.begin() + static_cast<std::ptrdiff_t>(ex.prompt_len));
    }
    BenchOptions bo;
    bo.kernel = MetaKernel::Dense;
    const auto [without, with] = bench_compare(model, prompts, bo);
    const auto table = bench_csv(without, with);
    std::cout << table << std::flush;
    const bool format_ok = table.rfind("Metric,No meta/pause tokens,With meta/pause tokens\n", 0) == 0 &&
                           std::count(table.begin(), table.end(), '\n') == 4;
    return {format_ok && with.slowdown_factor <= 1.5,
            "TPS " + fmt(without.tokens_per_second) + " vs " + fmt(with.tokens_per_second) + ", TTFT " +
                fmt(without.time_to_first_token_ms) + " vs " + fmt(with.time_to_first_token_ms) + " ms, slowdown " +
                fmt(with.slowdown_factor)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient fidelity", gradient_fidelity},
        {"mask correctness by brute force", mask_brute_force},
        {"degeneracy equivalences", degeneracy},
        {"entropy sharpening suite", entropy_suite},
        {"loss exclusion", loss_exclusion},
        {"generator-oracle agreement", generator_oracle},
        {"rotary and YaRN properties", rope_yarn},
        {"directional parity training result", parity_directional},
        {"ablation harness", ablation_harness},
        {"rate-distortion sweep", rate_distortion},
        {"bias expressivity", bias_expressivity_check},
        {"inference benchmark", inference_bench},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));
    std::size_t failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.count(i + 1)) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        if (!o.pass) ++failed;
        std::printf("criterion %2zu %s  %s: %s  [%.1f s]\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
