#include <cstring>
#include <random>

#include "doctest.h"
#include "metatok/ablation.hpp"
#include "metatok/corpus.hpp"

using namespace metatok;

namespace {

ModelConfig ablation_config(PEMode mode, std::size_t vocab = 20) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.block_size = 48;
    c.vocab_size = vocab;
    c.pe.mode = mode;
    c.seed = 21;
    return c;
}

}  // namespace

TEST_CASE("ablation modes") {
    for (auto m : kAllAblations) CHECK(ablation_from_string(to_string(m)) == m);
    CHECK(to_string(AblationMode::NoPos) == "no-pos");
    CHECK(ablation_header(AblationMode::NoEmbed) == "No Embed");
    CHECK_THROWS_AS(ablation_from_string("none"), std::invalid_argument);
    ModelConfig c;
    CHECK(!ablated(c, AblationMode::Full).pe.zero_at_meta);
    CHECK(ablated(c, AblationMode::NoPos).pe.zero_at_meta);
    CHECK(!ablated(c, AblationMode::NoPos).pe.zero_embed_at_meta);
    CHECK(ablated(c, AblationMode::NoEmbed).pe.zero_embed_at_meta);
    CHECK(ablated(c, AblationMode::Neither).pe.zero_at_meta);
    CHECK(ablated(c, AblationMode::Neither).pe.zero_embed_at_meta);
}

TEST_CASE("no-pos changes positional rows only at meta positions") {
    const std::vector<std::size_t> meta{0, 4, 9, 17};
    for (PEMode mode : {PEMode::APE, PEMode::ROPE})
        for (double sigma : {0.0, 0.5}) {
            CAPTURE(to_string(mode));
            CAPTURE(sigma);
            auto c = ablation_config(mode);
            c.pe.noise_sigma = sigma;
            Model<double> full(c);
            std::mt19937_64 rng(3);
            std::normal_distribution<double> nd;
            for (auto& v : full.params().get("tok_emb").value.values) v = nd(rng);
            if (mode == PEMode::APE)
                for (auto& v : full.params().get("pos_emb").value.values) v = nd(rng);
            Model<double> nopos(ablated(c, AblationMode::NoPos));
            for (std::size_t i = 0; i < full.params().size(); ++i)
                nopos.params()[i].value.values = full.params()[i].value.values;
            Model<double> noemb(ablated(c, AblationMode::NoEmbed));
            for (std::size_t i = 0; i < full.params().size(); ++i)
                noemb.params()[i].value.values = full.params()[i].value.values;

            const std::size_t n = 20;
            const auto a = positional_rows(full, n, meta, 11);
            const auto b = positional_rows(nopos, n, meta, 11);
            const auto e = positional_rows(noemb, n, meta, 11);
            REQUIRE(a.size() == b.size());
            REQUIRE(!a.empty());
            CHECK(a == e);
            const std::size_t w = a.size() / n;
            std::vector<std::uint8_t> is_meta(n, 0);
            for (auto p : meta) is_meta[p] = 1;
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t j = 0; j < w; ++j) {
                    if (is_meta[t]) {
                        REQUIRE(b[t * w + j] == 0.0);
                    } else {
                        // bitwise equality off the meta rows
                        REQUIRE(std::memcmp(&a[t * w + j], &b[t * w + j], sizeof(double)) == 0);
                    }
                }
            bool differs = false;
            for (auto p : meta)
                for (std::size_t j = 0; j < w; ++j) differs |= a[p * w + j] != 0.0;
            CHECK(differs);
        }
    Model<double> nope(ablation_config(PEMode::NOPE));
    CHECK(positional_rows(nope, 5, meta, 0).empty());
}

TEST_CASE("rank correlation") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3}, {5, 5, 5}) == 0.0);
    // ties get average ranks: y ranks (1.5, 1.5, 3), x ranks 1..3
    CHECK(spearman({1, 2, 3}, {7, 7, 9}) == doctest::Approx(0.8660254).epsilon(1e-6));
    CHECK_THROWS_AS(spearman({1}, {1}), std::invalid_argument);
}

TEST_CASE("ablation table and noise sweep") {
    const auto vocab = Vocab::build(vocab_corpus());
    auto c = ablation_config(PEMode::ROPE, vocab.size());
    c.block_size = 256;
    c.meta_id = vocab.meta_id();
    c.newline_id = vocab.newline_id();
    Model<float> m(c);
    std::mt19937_64 rng(2);
    auto test = make_dataset(Task::SegmentCount, 1, 8, rng);
    std::vector<AblationMode> modes(std::begin(kAllAblations), std::end(kAllAblations));
    auto r = run_ablation(m, vocab, test, kDefaultBins, modes);
    REQUIRE(r.reports.size() == 4);
    CHECK(r.label == "Meta + RoPE");
    const auto csv = ablation_csv(r);
    CHECK(csv.rfind("Model (Eval Len),Full,No Pos,No Embed,Neither\n", 0) == 0);
    CHECK(csv.find("Meta + RoPE (") != std::string::npos);
    const auto full = evaluate_model(m, vocab, test, kDefaultBins);
    for (std::size_t b = 0; b < full.bins.size(); ++b)
        CHECK(full.bins[b].token_accuracy == r.reports[0].bins[b].token_accuracy);
    CHECK_THROWS_AS(run_ablation(m, vocab, test, kDefaultBins, {}), std::invalid_argument);

    std::vector<double> grid(std::begin(kNoiseGrid), std::end(kNoiseGrid));
    auto s = noise_sweep(m, vocab, test, kDefaultBins, grid);
    REQUIRE(s.points.size() == 5);
    CHECK(s.points[0].sigma == 0.0);
    CHECK(s.points[4].sigma == 2.0);
    CHECK(s.monotone_nonincreasing == (s.rises == 0));
    CHECK(s.spearman >= -1.0);
    CHECK(s.spearman <= 1.0);
    CHECK(noise_csv(s).rfind("sigma,token_accuracy,sequence_accuracy,count\n", 0) == 0);
    CHECK_THROWS_AS(noise_sweep(m, vocab, test, kDefaultBins, {-1.0}), std::invalid_argument);
}
