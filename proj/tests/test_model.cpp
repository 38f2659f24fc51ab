#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "metatok/grad_check.hpp"
#include "metatok/model.hpp"

using namespace metatok;

namespace {

ModelConfig tiny(PEMode mode = PEMode::ROPE) {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.block_size = 32;
    c.vocab_size = 13;
    c.pe.mode = mode;
    c.seed = 5;
    return c;
}

// spread every parameter so biases and norms are exercised too
template <typename T>
void jitter(Model<T>& m, std::uint64_t seed, double sigma = 0.3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, sigma);
    auto& s = m.params();
    for (std::size_t i = 0; i < s.size(); ++i)
        for (auto& v : s[i].value.values) v += static_cast<T>(nd(rng));
}

std::vector<std::size_t> random_ids(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> u(3, vocab - 1);
    std::vector<std::size_t> ids(n);
    for (auto& v : ids) v = u(rng);
    return ids;
}

std::vector<double> logits_of(Model<double>& m, const std::vector<std::size_t>& ids,
                              const std::vector<std::size_t>& meta, std::uint64_t rng_seed = 0) {
    Tape<double> tape;
    std::mt19937_64 rng(rng_seed);
    ForwardOptions opt;
    opt.rng = &rng;
    return tape.value(m.forward(tape, ids, meta, opt)).values;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Kolmogorov distribution tail P(K > lambda)
double kolmogorov_q(double lambda) {
    if (lambda < 0.2) return 1.0;
    double s = 0;
    for (int k = 1; k < 100; ++k) s += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    return std::clamp(s, 0.0, 1.0);
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
    ModelConfig c;
    c.vocab_size = 517;
    const std::size_t d = 128, V = 517, L = 4;
    const std::size_t attn = 4 * d * d + 4 * d, mlp = 8 * d * d + 5 * d, norms = 2 * d;
    {
        Model<float> m(c);
        CHECK(m.params().total_elements() == V * d + L * (2 * attn + mlp + 3 * norms) + 2 * d + V);
        CHECK(analytic_parameter_count(c) == m.params().total_elements());
    }
    c.meta_attention = false;
    c.pe.mode = PEMode::APE;
    {
        Model<float> m(c);
        CHECK(m.params().total_elements() == V * d + 256 * d + L * (attn + mlp + 2 * norms) + 2 * d + V);
        CHECK(analytic_parameter_count(c) == m.params().total_elements());
    }
}

TEST_CASE("config validation") {
    auto c = tiny();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny();
    c.meta_fraction = 1.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny();
    c.vocab_size = 0;
    CHECK_THROWS_AS(Model<float>{c}, std::invalid_argument);
    c = tiny(PEMode::APE);
    CHECK(c.max_context() == 32);
    c = tiny();
    c.pe.yarn = yarn_preset(4.0);
    CHECK(c.max_context() == 4096);
}

TEST_CASE("inject_meta") {
    std::mt19937_64 rng(3);
    std::vector<std::size_t> ids(1024);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 3 + i % 7;

    SUBCASE("k = 0 leaves the sequence alone") {
        auto r = inject_meta(ids, 0.0, 1, rng);
        CHECK(r.ids == ids);
        CHECK(r.meta_positions.empty());
    }
    SUBCASE("k = 0.1 over 1024 tokens inserts 102") {
        auto r = inject_meta(ids, 0.1, 1, rng);
        CHECK(r.meta_positions.size() == 102);
        CHECK(r.ids.size() == 1126);
        CHECK(meta_positions_of(r.ids, 1) == r.meta_positions);
        std::vector<std::size_t> stripped;
        for (auto v : r.ids)
            if (v != 1) stripped.push_back(v);
        CHECK(stripped == ids);
    }
    SUBCASE("count is floor(k n) for every call") {
        std::uniform_int_distribution<std::size_t> len(0, 80);
        std::uniform_real_distribution<double> kd(0.0, 1.0);
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t n = len(rng);
            const double k = kd(rng);
            std::vector<std::size_t> s(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
            auto r = inject_meta(s, k, 1, rng);
            CHECK(r.meta_positions.size() == static_cast<std::size_t>(std::floor(k * n)));
        }
    }
    SUBCASE("truncation keeps only surviving positions") {
        auto r = inject_meta(ids, 0.5, 1, rng, 100);
        CHECK(r.ids.size() == 100);
        for (auto p : r.meta_positions) CHECK(p < 100);
        CHECK(meta_positions_of(r.ids, 1) == r.meta_positions);
    }
    SUBCASE("fixed seed reproduces positions") {
        std::mt19937_64 a(99), b(99);
        CHECK(inject_meta(ids, 0.1, 1, a).meta_positions == inject_meta(ids, 0.1, 1, b).meta_positions);
    }
    SUBCASE("bad k") { CHECK_THROWS_AS(inject_meta(ids, -0.1, 1, rng), std::invalid_argument); }
}

TEST_CASE("injected positions are uniform over the augmented slots") {
    // 1000 draws x 10 positions = 10^4 samples over 30 slots
    std::mt19937_64 rng(2024);
    const std::vector<std::size_t> ids(20, 5);
    const std::size_t slots = 30;
    std::vector<std::size_t> counts(slots, 0);
    std::size_t total = 0;
    for (int draw = 0; draw < 1000; ++draw) {
        auto r = inject_meta(ids, 0.5, 1, rng);
        REQUIRE(r.meta_positions.size() == 10);
        for (auto p : r.meta_positions) ++counts[p], ++total;
    }
    double cum = 0, d = 0;
    for (std::size_t i = 0; i < slots; ++i) {
        cum += static_cast<double>(counts[i]);
        d = std::max(d, std::abs(cum / total - static_cast<double>(i + 1) / slots));
    }
    const double sn = std::sqrt(static_cast<double>(total));
    const double p = kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
    CHECK(p > 0.01);
}

TEST_CASE("lm_targets") {
    std::vector<std::size_t> ids{4, 1, 5, 6};
    auto t = lm_targets(ids, std::vector<std::size_t>{1});
    CHECK(t.mask == std::vector<std::uint8_t>{0, 1, 1, 0});
    CHECK(t.targets[1] == 5);
    CHECK(t.targets[2] == 6);
    auto r = lm_targets(ids, std::vector<std::size_t>{1}, true);
    CHECK(r.mask == std::vector<std::uint8_t>{1, 1, 1, 0});
    CHECK(r.targets[0] == 5);
    CHECK_THROWS_AS(lm_targets(ids, std::vector<std::size_t>{4}), std::out_of_range);
}

TEST_CASE("forward shapes, causality and determinism") {
    for (auto mode : {PEMode::ROPE, PEMode::APE, PEMode::NOPE}) {
        CAPTURE(to_string(mode));
        auto c = tiny(mode);
        Model<double> m(c);
        jitter(m, 1);
        {
            Tape<double> tape;
            std::vector<std::size_t> one{4};
            Var y = m.forward(tape, one, {});
            CHECK(tape.value(y).shape == Shape{1, 13});
        }
        std::mt19937_64 rng(8);
        auto ids = random_ids(12, 13, rng);
        ids[3] = ids[7] = 1;
        const std::vector<std::size_t> meta{3, 7};
        const auto base = logits_of(m, ids, meta);
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            auto edited = ids;
            for (std::size_t j = i + 1; j < ids.size(); ++j) edited[j] = 3 + (edited[j] + 1) % 10;
            std::vector<std::size_t> em;
            for (auto p : meta)
                if (p <= i) em.push_back(p);
            const auto y = logits_of(m, edited, em);
            for (std::size_t r = 0; r <= i; ++r)
                for (std::size_t v = 0; v < 13; ++v) CHECK(y[r * 13 + v] == base[r * 13 + v]);
        }
        Model<double> again(c);
        jitter(again, 1);
        CHECK(logits_of(again, ids, meta) == base);
    }
    Model<double> ape(tiny(PEMode::APE));
    std::vector<std::size_t> longer(33, 4);
    CHECK_THROWS_AS(logits_of(ape, longer, {}), std::out_of_range);
}

TEST_CASE("with no meta tokens the meta sublayers are the identity") {
    auto c = tiny();
    Model<double> full(c);
    jitter(full, 2);
    c.meta_attention = false;
    Model<double> plain(c);
    for (std::size_t i = 0; i < plain.params().size(); ++i) {
        auto& p = plain.params()[i];
        p.value = full.params().get(p.name).value;
    }
    std::mt19937_64 rng(4);
    auto ids = random_ids(20, 13, rng);
    CHECK(max_abs_diff(logits_of(full, ids, {}), logits_of(plain, ids, {})) < 1e-9);
}

TEST_CASE("packed batches match separate forwards") {
    Model<double> m(tiny());
    jitter(m, 3);
    std::mt19937_64 rng(6);
    std::vector<Sequence> batch;
    for (std::size_t n : {5u, 9u, 1u}) {
        auto ids = random_ids(n, 13, rng);
        std::vector<std::size_t> meta;
        if (n > 3) ids[2] = 1, ids[n - 1] = 1, meta = {2, n - 1};
        batch.push_back({ids, meta});
    }
    Tape<double> tape;
    const auto packed = tape.value(m.forward(tape, batch)).values;
    std::size_t row = 0;
    for (const auto& s : batch) {
        const auto single = logits_of(m, s.ids, s.meta_positions);
        std::vector<double> slice(packed.begin() + row * 13, packed.begin() + (row + s.ids.size()) * 13);
        CHECK(max_abs_diff(slice, single) < 1e-12);
        row += s.ids.size();
    }
    ForwardOptions opt;
    opt.logit_rows = {0, 7, 14};
    Tape<double> t2;
    const auto picked = t2.value(m.forward(t2, batch, opt)).values;
    REQUIRE(picked.size() == 3 * 13);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t v = 0; v < 13; ++v) CHECK(picked[r * 13 + v] == packed[opt.logit_rows[r] * 13 + v]);
}

TEST_CASE("loss exclusion at meta targets") {
    Model<double> m(tiny());
    jitter(m, 4);
    SUBCASE("a, m, b: the row predicting m gets zero gradient") {
        std::vector<std::size_t> ids{5, 1, 7};
        std::vector<std::size_t> meta{1};
        Tape<double> tape;
        Var logits = m.forward(tape, ids, meta);
        Var loss = lm_loss(tape, logits, ids, meta);
        tape.backward(loss);
        const auto& g = tape.grad(logits);
        for (std::size_t v = 0; v < 13; ++v) CHECK(g[v] == 0.0);
        double row1 = 0;
        for (std::size_t v = 0; v < 13; ++v) row1 += std::abs(g[13 + v]);
        CHECK(row1 > 0);

        // perturbing row 0 logits leaves the loss unchanged
        auto x = tape.value(logits);
        Tape<double> t2;
        Var base = lm_loss(t2, t2.leaf(x), ids, meta);
        for (std::size_t v = 0; v < 13; ++v) x.values[v] += 3.0 * static_cast<double>(v);
        Var moved = lm_loss(t2, t2.leaf(x), ids, meta);
        CHECK(t2.value(base)[0] == t2.value(moved)[0]);
    }
    SUBCASE("no meta tokens gives plain shifted cross-entropy") {
        std::vector<std::size_t> ids{3, 8, 4, 4, 9};
        Tape<double> tape;
        Var logits = m.forward(tape, ids, {});
        const auto& L = tape.value(logits);
        double want = 0;
        for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
            double mx = -1e300, z = 0;
            for (std::size_t v = 0; v < 13; ++v) mx = std::max(mx, L.values[t * 13 + v]);
            for (std::size_t v = 0; v < 13; ++v) z += std::exp(L.values[t * 13 + v] - mx);
            want += std::log(z) + mx - L.values[t * 13 + ids[t + 1]];
        }
        want /= 4.0;
        CHECK(tape.value(lm_loss(tape, logits, ids, {}))[0] == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("all meta ids is an empty loss") {
        std::vector<std::size_t> ids{1, 1, 1};
        std::vector<std::size_t> meta{0, 1, 2};
        Tape<double> tape;
        Var logits = m.forward(tape, ids, meta);
        try {
            lm_loss(tape, logits, ids, meta);
            FAIL("expected an error");
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()) == "empty loss");
        }
    }
}

TEST_CASE("model gradients pass a finite-difference check") {
    for (auto mode : {PEMode::ROPE, PEMode::APE}) {
        auto c = tiny(mode);
        c.n_layers = 1;
        c.d_model = 8;
        Model<double> m(c);
        jitter(m, 5);
        std::vector<std::size_t> ids{4, 1, 6, 7, 1, 9, 3};
        std::vector<std::size_t> meta{1, 4};
        std::vector<Parameter<double>*> params;
        for (std::size_t i = 0; i < m.params().size(); ++i) params.push_back(&m.params()[i]);
        auto f = [&](Tape<double>& t) { return lm_loss(t, m.forward(t, ids, meta), ids, meta); };
        CHECK(grad_check(f, params, 1e-4, 1, 16).max_rel_error < 1e-5);
    }
}

TEST_CASE("inference session reproduces the tape forward") {
    for (auto mode : {PEMode::ROPE, PEMode::APE, PEMode::NOPE})
        for (double sigma : {0.0, 0.5})
            for (auto kernel : {MetaKernel::Dense, MetaKernel::Compact}) {
                CAPTURE(to_string(mode));
                CAPTURE(sigma);
                auto c = tiny(mode);
                c.pe.noise_sigma = sigma;
                c.pe.zero_at_meta = true;
                Model<double> m(c);
                jitter(m, 6);
                std::mt19937_64 rng(10);
                auto ids = random_ids(14, 13, rng);
                ids[2] = ids[5] = ids[6] = ids[12] = 1;
                const std::vector<std::size_t> meta{2, 5, 6, 12};
                const auto want = logits_of(m, ids, meta, 77);

                InferenceSession<double> s(m, kernel, 77);
                std::vector<double> got;
                std::vector<std::size_t> prefix(ids.begin(), ids.begin() + 4);
                s.feed(prefix, &got);
                for (std::size_t t = 4; t < ids.size(); ++t) {
                    auto last = s.feed(std::span<const std::size_t>(&ids[t], 1));
                    got.insert(got.end(), last.begin(), last.end());
                }
                CHECK(s.length() == ids.size());
                CHECK(max_abs_diff(got, want) < 1e-9);
            }
}

TEST_CASE("generate") {
    auto c = tiny();
    Model<double> m(c);
    jitter(m, 7);
    std::vector<std::size_t> prompt{4, 5, 1, 6};
    CHECK(generate(m, prompt, 0).empty());
    auto a = generate(m, prompt, 10);
    CHECK(a == generate(m, prompt, 10));
    CHECK(a.size() <= 10);
    CHECK(std::find(a.begin(), a.end(), c.newline_id) == a.end());
    CHECK(generate(m, prompt, 10, MetaKernel::Dense) == a);

    // greedy against the full forward, step by step
    std::vector<std::size_t> seq = prompt;
    for (std::size_t t = 0; t < a.size(); ++t) {
        const auto y = logits_of(m, seq, meta_positions_of(seq, c.meta_id));
        const auto* row = y.data() + (seq.size() - 1) * 13;
        CHECK(static_cast<std::size_t>(std::max_element(row, row + 13) - row) == a[t]);
        seq.push_back(a[t]);
    }

    Model<double> ape(tiny(PEMode::APE));
    std::vector<std::size_t> p30(30, 4);
    try {
        generate(ape, p30, 5);
        FAIL("expected an error");
    } catch (const std::length_error& e) {
        CHECK(std::string(e.what()) == "context overflow");
    }
}

TEST_CASE("checkpoint roundtrip") {
    const auto dir = std::filesystem::temp_directory_path() / "metatok_ckpt_test";
    std::filesystem::remove_all(dir);
    auto c = tiny(PEMode::ROPE);
    c.pe.yarn = yarn_preset(4.0);
    c.pe.noise_sigma = 0.1;
    c.meta_fraction = 0.3;
    Model<float> m(c);
    jitter(m, 8);
    OptimizerState opt;
    opt.step = 17;
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        opt.m.emplace_back(m.params()[i].value.size(), 0.25f * static_cast<float>(i));
        opt.v.emplace_back(m.params()[i].value.size(), 1.5f);
    }
    save_checkpoint(m, 42, dir, &opt);

    std::size_t step = 0;
    OptimizerState back;
    auto loaded = load_checkpoint<float>(dir, &step, &back);
    CHECK(step == 42);
    CHECK(loaded.config() == m.config());
    CHECK(read_checkpoint_config(dir) == c);
    for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(loaded.params()[i].value.values == m.params()[i].value.values);
    CHECK(back.step == 17);
    CHECK(back.m == opt.m);
    CHECK(back.v == opt.v);
    {
        std::vector<std::size_t> ids{4, 1, 5, 6};
        std::vector<std::size_t> meta{1};
        Tape<float> t1, t2;
        ForwardOptions o;
        CHECK(t1.value(m.forward(t1, ids, meta, o)).values == t2.value(loaded.forward(t2, ids, meta, o)).values);
    }
    {
        std::ifstream f(dir / "manifest.txt");
        std::stringstream ss;
        ss << f.rdbuf();
        CHECK(ss.str().find("parameter_count " + std::to_string(analytic_parameter_count(c))) != std::string::npos);
    }

    // edit vocab_size in the manifest
    {
        std::ifstream f(dir / "manifest.txt");
        std::stringstream ss;
        ss << f.rdbuf();
        auto text = ss.str();
        const std::string key = "config vocab_size 13";
        REQUIRE(text.find(key) != std::string::npos);
        text.replace(text.find(key), key.size(), "config vocab_size 14");
        std::ofstream(dir / "manifest.txt") << text;
    }
    CHECK_THROWS_AS(load_checkpoint<float>(dir), ShapeError);

    save_checkpoint(m, 1, dir);
    std::filesystem::resize_file(dir / "ln_f.gain.bin", 10);
    CHECK_THROWS_AS(load_checkpoint<float>(dir), std::runtime_error);
    std::filesystem::remove_all(dir);
}
