#include <cmath>
#include <random>

#include "doctest.h"
#include "metatok/attention.hpp"
#include "metatok/grad_check.hpp"
#include "metatok/position.hpp"

using namespace metatok;

namespace {

const double kNegInf = -std::numeric_limits<double>::infinity();

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

Tensor<double> randn(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Tensor<double> t({r, c});
    for (auto& v : t.values) v = nd(rng);
    return t;
}

std::vector<double> affine(const Tensor<double>& x, const Parameter<double>& w, const Parameter<double>& b) {
    const std::size_t n = x.rows(), k = x.cols(), m = w.value.cols();
    std::vector<double> y(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = b.value.values[j];
            for (std::size_t p = 0; p < k; ++p) s += x.values[i * k + p] * w.value.values[p * m + j];
            y[i * m + j] = s;
        }
    return y;
}

// Direct evaluation of softmax(QKᵀ/√dk + mask)·V then the output projection,
// looping over admissible keys only. Rows without admissible keys are zero.
std::vector<double> reference(const Tensor<double>& x, const Block& b, std::size_t heads,
                              const std::function<bool(std::size_t, std::size_t)>& admissible,
                              bool zero_empty_rows, const std::vector<double>* angles = nullptr) {
    const std::size_t n = x.rows(), d = x.cols(), dk = d / heads;
    auto q = affine(x, *b.w.wq, *b.w.bq), k = affine(x, *b.w.wk, *b.w.bk), v = affine(x, *b.w.wv, *b.w.bv);
    if (angles) {
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
            double mx = kNegInf;
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
    Tensor<double> a({n, d}, attn);
    auto out = affine(a, *b.w.wo, *b.w.bo);
    if (zero_empty_rows)
        for (std::size_t i = 0; i < n; ++i)
            if (empty[i]) std::fill_n(out.begin() + i * d, d, 0.0);
    return out;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("build_masks examples") {
    auto m = build_masks(3, {});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(m.meta_at(i, j) == kNegInf);
            CHECK(m.causal_at(i, j) == (j <= i ? 0.0 : kNegInf));
        }
    std::vector<std::size_t> p{1, 3};
    m = build_masks(4, p);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            const bool open = (i == 1 || i == 3) && (j == 1 || j == 3);
            CHECK(m.meta_at(i, j) == (open ? 0.0 : kNegInf));
        }
    std::vector<std::size_t> all{0, 1};
    m = build_masks(2, all);
    for (auto v : m.meta) CHECK(v == 1);
    std::vector<std::size_t> bad{5};
    CHECK_THROWS_AS(build_masks(4, bad), std::out_of_range);
}

TEST_CASE("row_entropy examples") {
    CHECK(row_entropy(std::vector<double>{1, 0, 0}) == 0.0);
    for (int n : {2, 5, 64}) {
        std::vector<double> u(n, 1.0 / n);
        CHECK(row_entropy(u) == doctest::Approx(std::log(n)).epsilon(1e-12));
    }
    const std::vector<double> r{0.6604, 0.2447, 0.0900, 0.0049};
    double h = 0;
    for (double a : r) h -= a * std::log(a);
    CHECK(row_entropy(r) == doctest::Approx(h).epsilon(1e-12));
    CHECK(row_entropy(r) == doctest::Approx(0.86125).epsilon(1e-5));
    CHECK_THROWS_AS(row_entropy(std::vector<double>{0.5, 0.6}), std::invalid_argument);
    CHECK_THROWS_AS(row_entropy(std::vector<double>{1.5, -0.5}), std::invalid_argument);
}

TEST_CASE("causal_mha matches the direct reference") {
    std::mt19937_64 rng(5);
    for (std::size_t heads : {1u, 2u, 4u}) {
        const std::size_t n = 5, d = 8;
        Block b(d, rng);
        auto x = randn(n, d, rng);
        auto masks = build_masks(n, {});
        Tape<double> tape;
        std::vector<HeadTrace> trace;
        Var y = causal_mha(tape, tape.leaf(x), b.w, {heads, 1.0}, nullptr, masks, &trace);
        auto ref = reference(x, b, heads, [](std::size_t i, std::size_t j) { return j <= i; }, false);
        CHECK(max_diff(tape.value(y).values, ref) < 1e-9);
        REQUIRE(trace.size() == heads);
        for (const auto& h : trace)
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (j > i) CHECK(h.weights[i * n + j] == 0.0);
                    s += h.weights[i * n + j];
                }
                CHECK(std::abs(s - 1.0) < 1e-9);
                CHECK(h.entropy[i] >= 0.0);
            }
    }
}

TEST_CASE("causal_mha with rotary tables matches the reference") {
    std::mt19937_64 rng(6);
    const std::size_t n = 6, d = 8, heads = 2;
    Block b(d, rng);
    auto x = randn(n, d, rng);
    PEConfig pe;
    auto angles = rope_angle_table(n, d / heads, pe, {}, nullptr);
    auto rope = RotaryTables<double>::from_angles(angles, d / heads / 2);
    Tape<double> tape;
    Var y = causal_mha(tape, tape.leaf(x), b.w, {heads, 1.0}, &rope, build_masks(n, {}));
    auto ref = reference(x, b, heads, [](std::size_t i, std::size_t j) { return j <= i; }, false, &angles);
    CHECK(max_diff(tape.value(y).values, ref) < 1e-9);
}

TEST_CASE("causal_mha T=1 is the value path through the output projection") {
    std::mt19937_64 rng(7);
    Block b(4, rng);
    auto x = randn(1, 4, rng);
    Tape<double> tape;
    Var y = causal_mha(tape, tape.leaf(x), b.w, {2, 1.0}, nullptr, build_masks(1, {}));
    Tensor<double> v({1, 4}, affine(x, *b.w.wv, *b.w.bv));
    CHECK(max_diff(tape.value(y).values, affine(v, *b.w.wo, *b.w.bo)) < 1e-12);
}

TEST_CASE("causal_mha is causal") {
    std::mt19937_64 rng(8);
    const std::size_t n = 7, d = 8;
    Block b(d, rng);
    auto x = randn(n, d, rng);
    auto masks = build_masks(n, {});
    Tape<double> tape;
    auto y0 = tape.value(causal_mha(tape, tape.leaf(x), b.w, {2, 1.0}, nullptr, masks)).values;
    for (std::size_t p = 0; p < n; ++p) {
        auto xp = x;
        for (std::size_t j = 0; j < d; ++j) xp.values[p * d + j] += 3.0;
        auto y1 = tape.value(causal_mha(tape, tape.leaf(xp), b.w, {2, 1.0}, nullptr, masks)).values;
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < d; ++j) CHECK(y1[i * d + j] == y0[i * d + j]);
    }
}

TEST_CASE("meta_attention examples") {
    std::mt19937_64 rng(9);
    const std::size_t n = 4, d = 8;
    Block b(d, rng);
    auto x = randn(n, d, rng);
    for (auto kernel : {MetaKernel::Dense, MetaKernel::Compact}) {
        Tape<double> tape;
        auto empty = tape.value(meta_attention(tape, tape.leaf(x), b.w, {2, 1.0}, nullptr, build_masks(n, {}), {}, kernel));
        for (double v : empty.values) CHECK(v == 0.0);

        std::vector<std::size_t> all{0, 1, 2, 3};
        auto masks = build_masks(n, all);
        auto m = tape.value(meta_attention(tape, tape.leaf(x), b.w, {2, 1.0}, nullptr, masks, all, kernel)).values;
        auto c = tape.value(causal_mha(tape, tape.leaf(x), b.w, {2, 1.0}, nullptr, masks)).values;
        CHECK(max_diff(m, c) < 1e-9);

        std::vector<std::size_t> p{1, 3};
        masks = build_masks(n, p);
        std::vector<HeadTrace> trace;
        auto y = tape.value(meta_attention(tape, tape.leaf(x), b.w, {2, 1.0}, nullptr, masks, p, kernel, &trace)).values;
        auto ref = reference(x, b, 2, [](std::size_t i, std::size_t j) {
            return j <= i && (i == 1 || i == 3) && (j == 1 || j == 3);
        }, true);
        CHECK(max_diff(y, ref) < 1e-9);
        for (std::size_t j = 0; j < d; ++j) {
            CHECK(y[0 * d + j] == 0.0);
            CHECK(y[2 * d + j] == 0.0);
        }
        for (const auto& h : trace) {
            CHECK(h.weights[3 * n + 0] == 0.0);
            CHECK(h.weights[3 * n + 2] == 0.0);
            CHECK(h.weights[3 * n + 1] + h.weights[3 * n + 3] == doctest::Approx(1.0));
            CHECK(h.weights[1 * n + 1] == 1.0);
        }
    }
}

TEST_CASE("dense and compact meta kernels agree with rotary") {
    std::mt19937_64 rng(10);
    const std::size_t n = 9, d = 16, heads = 4;
    Block b(d, rng);
    auto x = randn(n, d, rng);
    PEConfig pe;
    auto angles = rope_angle_table(n, d / heads, pe, {}, nullptr);
    auto rope = RotaryTables<double>::from_angles(angles, d / heads / 2);
    std::vector<std::size_t> p{0, 3, 4, 8};
    auto masks = build_masks(n, p);
    Tape<double> tape;
    auto dense = tape.value(meta_attention(tape, tape.leaf(x), b.w, {heads, 1.3}, &rope, masks, p, MetaKernel::Dense)).values;
    auto compact = tape.value(meta_attention(tape, tape.leaf(x), b.w, {heads, 1.3}, &rope, masks, p, MetaKernel::Compact)).values;
    CHECK(max_diff(dense, compact) < 1e-12);
}

TEST_CASE("attention blocks pass grad_check") {
    std::mt19937_64 rng(12);
    const std::size_t n = 8, d = 8, heads = 2;
    Block b(d, rng);
    Parameter<double> x("x", randn(n, d, rng), false);
    PEConfig pe;
    auto angles = rope_angle_table(n, d / heads, pe, {}, nullptr);
    auto rope = RotaryTables<double>::from_angles(angles, d / heads / 2);
    std::vector<std::size_t> p{1, 2, 6};
    auto masks = build_masks(n, p);
    auto params = b.params();
    params.push_back(&x);
    auto causal = [&](Tape<double>& t) {
        return ops::sum_squares(t, causal_mha(t, t.param(x), b.w, {heads, 1.0}, &rope, masks));
    };
    CHECK(grad_check(causal, params, 1e-5).max_rel_error < 1e-5);
    for (auto kernel : {MetaKernel::Dense, MetaKernel::Compact}) {
        auto meta = [&](Tape<double>& t) {
            return ops::sum_squares(t, meta_attention(t, t.param(x), b.w, {heads, 1.0}, &rope, masks, p, kernel));
        };
        CHECK(grad_check(meta, params, 1e-5).max_rel_error < 1e-5);
    }
}
