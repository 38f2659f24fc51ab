#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "metatok/autodiff.hpp"
#include "metatok/position.hpp"

using namespace metatok;

namespace {

std::vector<double> randv(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("rope examples") {
    PEConfig cfg;
    std::vector<double> x{0.3, -1.2, 2.0, 0.7};
    CHECK(rope_apply(x, 0.0, cfg) == x);

    auto y = rope_apply(std::vector<double>{1.0, 0.0}, 1.0, cfg);
    CHECK(y[0] == doctest::Approx(0.5403).epsilon(1e-4));
    CHECK(y[1] == doctest::Approx(0.8415).epsilon(1e-4));
    CHECK(std::abs(y[0] - std::cos(1.0)) < 1e-15);

    CHECK_THROWS_AS(rope_apply(std::vector<double>{1, 2, 3}, 1.0, cfg), std::invalid_argument);
}

TEST_CASE("rope preserves norms and depends only on the offset") {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> pos(0, 500);
    for (const bool yarn : {false, true}) {
        PEConfig cfg;
        if (yarn) cfg.yarn = yarn_preset(4.0);
        for (int trial = 0; trial < 100; ++trial) {
            auto q = randv(32, rng), k = randv(32, rng);
            const int i = pos(rng), j = pos(rng), s = pos(rng);
            auto qi = rope_apply(q, i, cfg), kj = rope_apply(k, j, cfg);
            CHECK(std::abs(std::sqrt(dot(qi, qi)) - std::sqrt(dot(q, q))) < 1e-9);
            auto qs = rope_apply(q, i + s, cfg), ks = rope_apply(k, j + s, cfg);
            CHECK(std::abs(dot(qi, kj) - dot(qs, ks)) < 1e-9);
        }
    }
}

TEST_CASE("yarn_adjust") {
    const auto f = rope_frequencies(64, 10000.0);
    SUBCASE("scale 1 is the identity") {
        YarnParams p;
        p.scale = 1.0;
        auto adj = yarn_adjust(f, p);
        for (double v : adj.factors) CHECK(v == 1.0);
        CHECK(adj.logit_multiplier == 1.0);
        std::vector<double> angles(5 * f.size());
        for (std::size_t i = 0; i < angles.size(); ++i) angles[i] = 0.37 * static_cast<double>(i);
        CHECK(yarn_adjust_angles(angles, f, p) == angles);
    }
    SUBCASE("scale 4 and 8 presets") {
        for (double s : {4.0, 8.0}) {
            auto p = yarn_preset(s);
            CHECK(p.scale == s);
            CHECK(p.original_max_seq_len == 1024);
            CHECK(p.beta_fast == 32.0);
            CHECK(p.beta_slow == 1.0);
            auto adj = yarn_adjust(f, p);
            // slowest slot fully interpolated, fastest slot untouched
            CHECK(std::abs(adj.factors.back() - 1.0 / s) < 1e-12);
            CHECK(adj.factors.front() == 1.0);
            for (std::size_t i = 1; i < f.size(); ++i) CHECK(adj.factors[i] <= adj.factors[i - 1]);
            const double m = 0.1 * std::log(s) + 1.0;
            CHECK(adj.logit_multiplier == doctest::Approx(m * m));
        }
    }
    SUBCASE("longest wavelength angle divided by the scale") {
        auto p = yarn_preset(8.0);
        const std::size_t t = 3000;
        std::vector<double> angles(f.size());
        for (std::size_t i = 0; i < f.size(); ++i) angles[i] = static_cast<double>(t) * f[i];
        auto adj = yarn_adjust_angles(angles, f, p);
        CHECK(std::abs(adj.back() - angles.back() / 8.0) < 1e-9);
    }
    SUBCASE("ramp interior follows the linear rule") {
        YarnParams p = yarn_preset(4.0);
        for (std::size_t i = 0; i < f.size(); ++i) {
            const double r = 1024.0 / (2 * std::numbers::pi / f[i]);
            auto adj = yarn_adjust(std::vector<double>{f[i]}, p);
            double g = (r - 1.0) / 31.0;
            g = std::min(1.0, std::max(0.0, g));
            CHECK(adj.factors[0] == doctest::Approx((1 - g) / 4.0 + g).epsilon(1e-12));
        }
    }
    SUBCASE("validation") {
        YarnParams p;
        p.scale = 0.5;
        CHECK_THROWS_AS(p.validate(), std::invalid_argument);
        p = YarnParams{};
        p.original_max_seq_len = 0;
        CHECK_THROWS_AS(p.validate(), std::invalid_argument);
        PEConfig c;
        c.mode = PEMode::APE;
        c.yarn = YarnParams{};
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
        c.mode = PEMode::ROPE;
        CHECK_NOTHROW(c.validate());
        c.noise_sigma = -1;
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    }
}

TEST_CASE("ape_embed") {
    Tensor<double> table({4, 3});
    for (std::size_t i = 0; i < table.size(); ++i) table.values[i] = static_cast<double>(i);
    CHECK(ape_embed(0, table) == std::vector<double>{0, 1, 2});
    try {
        ape_embed(4, table);
        FAIL("expected an error");
    } catch (const std::out_of_range& e) {
        CHECK(std::string(e.what()) == "position out of range");
    }

    // one SGD step with gradient only at row 3
    Parameter<double> p("pos", table, false);
    Tape<double> tape;
    std::vector<std::size_t> rows{3};
    tape.backward(ops::sum_squares(tape, ops::gather_rows(tape, tape.param(p), rows)));
    auto before = p.value.values;
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value.values[i] -= 0.1 * p.grad[i];
    for (std::size_t i = 0; i < 12; ++i) {
        if (i >= 9) CHECK(p.value.values[i] != before[i]);
        else CHECK(p.value.values[i] == before[i]);
    }
}

TEST_CASE("apply_ablations") {
    std::mt19937_64 rng(1);
    auto base = randv(6 * 4, rng);
    PEConfig cfg;
    SUBCASE("zero_at_meta without meta positions is the identity") {
        cfg.zero_at_meta = true;
        auto rows = base;
        apply_ablations(rows, 4, {}, cfg, nullptr);
        CHECK(rows == base);
    }
    SUBCASE("sigma zero is the identity") {
        auto rows = base;
        std::mt19937_64 r(3);
        apply_ablations(rows, 4, std::vector<std::size_t>{1, 2}, cfg, &r);
        CHECK(rows == base);
    }
    SUBCASE("noise changes rows and is reproducible") {
        cfg.noise_sigma = 2.0;
        auto a = base, b = base;
        std::mt19937_64 r1(77), r2(77);
        apply_ablations(a, 4, {}, cfg, &r1);
        apply_ablations(b, 4, {}, cfg, &r2);
        CHECK(a == b);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] != base[i]);
        double var = 0;
        for (std::size_t i = 0; i < a.size(); ++i) var += (a[i] - base[i]) * (a[i] - base[i]);
        CHECK(var / a.size() > 1.0);
    }
    SUBCASE("zeroing touches exactly the meta rows") {
        cfg.zero_at_meta = true;
        auto rows = base;
        std::vector<std::size_t> meta{1, 4};
        apply_ablations(rows, 4, meta, cfg, nullptr);
        for (std::size_t t = 0; t < 6; ++t)
            for (std::size_t j = 0; j < 4; ++j) {
                if (t == 1 || t == 4) CHECK(rows[t * 4 + j] == 0.0);
                else CHECK(rows[t * 4 + j] == base[t * 4 + j]);
            }
    }
    SUBCASE("noise grid") {
        CHECK(std::vector<double>(std::begin(kNoiseGrid), std::end(kNoiseGrid)) ==
              std::vector<double>{0.0, 0.1, 0.5, 1.0, 2.0});
    }
}

TEST_CASE("rope angle table zeroes rotation at meta positions") {
    PEConfig cfg;
    cfg.zero_at_meta = true;
    std::vector<std::size_t> meta{2};
    auto a = rope_angle_table(4, 8, cfg, meta, nullptr);
    PEConfig plain;
    auto b = rope_angle_table(4, 8, plain, meta, nullptr);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t i = 0; i < 4; ++i) {
            if (t == 2) CHECK(a[t * 4 + i] == 0.0);
            else CHECK(a[t * 4 + i] == b[t * 4 + i]);
        }
    CHECK(pe_mode_from_string("nope") == PEMode::NOPE);
    CHECK(to_string(PEMode::APE) == "ape");
    CHECK_THROWS(pe_mode_from_string("alibi"));
}
