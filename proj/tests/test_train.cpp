#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "doctest.h"
#include "metatok/corpus.hpp"
#include "metatok/train.hpp"

using namespace metatok;

namespace {

const Vocab& shared_vocab() {
    static const Vocab v = Vocab::build(vocab_corpus());
    return v;
}

ModelConfig small_config(const Vocab& v) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.block_size = 64;
    c.vocab_size = v.size();
    c.meta_id = v.meta_id();
    c.newline_id = v.newline_id();
    c.seed = 11;
    return c;
}

TrainConfig short_run(std::size_t iters) {
    TrainConfig t;
    t.warmup_iters = 1;
    t.max_iters = iters;
    t.batch_size = 2;
    t.eval_batches = 2;
    t.eval_interval = 1000;
    return t;
}

std::vector<float> flat_params(const Model<float>& m) {
    std::vector<float> out;
    const auto& s = m.params();
    for (std::size_t i = 0; i < s.size(); ++i) out.insert(out.end(), s[i].value.values.begin(), s[i].value.values.end());
    return out;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    CHECK(lr_at(c, 0) == doctest::Approx(6e-4 / 2000.0).epsilon(1e-12));
    CHECK(lr_at(c, 1999) == doctest::Approx(6e-4).epsilon(1e-12));
    CHECK(lr_at(c, 2000) == doctest::Approx(6e-4).epsilon(1e-12));
    CHECK(lr_at(c, c.max_iters) == doctest::Approx(6e-5).epsilon(1e-12));
    const std::size_t mid = 2000 + (c.max_iters - 2000) / 2;
    CHECK(lr_at(c, mid) == doctest::Approx(0.5 * (6e-4 + 6e-5)).epsilon(1e-9));
    double prev = lr_at(c, 2000);
    for (std::size_t s = 2000; s <= c.max_iters; s += 997) {
        const double lr = lr_at(c, s);
        CHECK(lr <= prev + 1e-15);
        CHECK(lr >= c.min_lr - 1e-15);
        prev = lr;
    }
    TrainConfig bad;
    bad.warmup_iters = bad.max_iters;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = TrainConfig{};
    bad.min_lr = 1e-2;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("optimizer with zero gradients and no decay leaves parameters unchanged") {
    ParameterStore<float> s;
    std::mt19937_64 rng(2);
    std::normal_distribution<float> nd;
    Tensor<float> w({3, 4});
    for (auto& v : w.values) v = nd(rng);
    s.add("w", w, true);
    s.add("b", Tensor<float>({4}), false);
    TrainConfig c;
    c.weight_decay = 0;
    AdamW<float> opt(s, c);
    const auto before = s.get("w").value.values;
    for (int i = 0; i < 5; ++i) opt.step(1e-2);
    CHECK(s.get("w").value.values == before);
    CHECK(opt.steps() == 5);

    // decay alone shrinks decayed weights by (1 - lr·wd) per step
    c.weight_decay = 0.5;
    AdamW<float> decayed(s, c);
    decayed.step(0.1);
    for (std::size_t j = 0; j < before.size(); ++j)
        CHECK(s.get("w").value.values[j] == doctest::Approx(before[j] * 0.95).epsilon(1e-6));
}

TEST_CASE("adam step on a single coordinate") {
    ParameterStore<double> s;
    Tensor<double> w({1});
    w.values[0] = 1.0;
    s.add("w", w, false);
    TrainConfig c;
    AdamW<double> opt(s, c);
    s.get("w").grad[0] = 0.3;
    opt.step(0.1);
    // bias-corrected first step is lr·g/(|g| + eps)
    CHECK(s.get("w").value.values[0] == doctest::Approx(1.0 - 0.1 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
    auto st = opt.state();
    CHECK(st.step == 1);
    AdamW<double> again(s, c);
    again.load_state(st);
    CHECK(again.steps() == 1);
    st.m.pop_back();
    CHECK_THROWS_AS(again.load_state(st), ShapeError);
}

TEST_CASE("gradient clipping bounds the global norm") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd(0.0, 3.0);
    for (int trial = 0; trial < 20; ++trial) {
        ParameterStore<double> s;
        s.add("a", Tensor<double>({5, 7}), true);
        s.add("b", Tensor<double>({11}), false);
        for (std::size_t i = 0; i < s.size(); ++i)
            for (auto& g : s[i].grad) g = nd(rng);
        const double clip = 0.25 + trial * 0.5;
        double sq = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            for (double g : s[i].grad) sq += g * g;
        const double pre = clip_grad_norm(s, clip);
        CHECK(pre == doctest::Approx(std::sqrt(sq)));
        double post = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            for (double g : s[i].grad) post += g * g;
        CHECK(std::sqrt(post) <= clip + 1e-9);
        if (pre <= clip) CHECK(std::sqrt(post) == doctest::Approx(pre));
    }
    ParameterStore<float> bad;
    bad.add("x", Tensor<float>({1}), true);
    bad.get("x").grad[0] = std::nanf("");
    CHECK_THROWS_AS(clip_grad_norm(bad, 1.0), NumericError);
}

TEST_CASE("pretraining") {
    const auto& v = shared_vocab();
    const auto tokens = v.encode(pretraining_corpus(40, 3));
    Model<float> m(small_config(v));
    CHECK(pretrain_window(m.config()) + static_cast<std::size_t>(std::floor(0.1 * pretrain_window(m.config()))) <= 64);

    SUBCASE("one iteration changes parameters and gives a finite loss") {
        const auto before = flat_params(m);
        auto res = pretrain(m, tokens, short_run(2));
        CHECK(res.steps == 2);
        CHECK(std::isfinite(res.log[0].loss));
        CHECK(std::isfinite(res.final_eval_loss));
        CHECK(flat_params(m) != before);
    }
    SUBCASE("deterministic for a fixed seed") {
        Model<float> a(small_config(v)), b(small_config(v));
        auto ra = pretrain(a, tokens, short_run(3));
        auto rb = pretrain(b, tokens, short_run(3));
        CHECK(flat_params(a) == flat_params(b));
        CHECK(ra.final_eval_loss == rb.final_eval_loss);
    }
    SUBCASE("resuming from optimizer state continues the step count") {
        OptimizerState st;
        pretrain(m, tokens, short_run(2), {}, &st);
        CHECK(st.step == 2);
        auto res = pretrain(m, tokens, short_run(4), {}, &st);
        CHECK(res.steps == 2);
        CHECK(st.step == 4);
    }
    SUBCASE("divergence aborts with a diagnostic") {
        m.params().get("tok_emb").value.values[v.id("the").value() * 16] = std::numeric_limits<float>::infinity();
        CHECK_THROWS_AS(pretrain(m, tokens, short_run(2)), NumericError);
    }
    SUBCASE("corpus too small") {
        std::vector<std::size_t> few(10, 5);
        CHECK_THROWS_AS(pretrain(m, few, short_run(2)), std::invalid_argument);
    }
}

TEST_CASE("fine-tune examples and loss mask") {
    const auto& v = shared_vocab();
    std::mt19937_64 rng(4);
    auto inst = gen_parity_bits(6, rng);
    auto ex = make_example(v, inst);
    CHECK(ex.prompt_len == v.encode(inst.prompt).size());
    CHECK(ex.ids.back() == v.newline_id());
    const auto tg = finetune_targets(ex);
    REQUIRE(tg.size() == 2);  // the answer bit and the newline
    CHECK(tg[0].first == ex.prompt_len - 1);
    CHECK(tg[0].second == v.encode(inst.answer)[0]);
    CHECK(tg[1].second == v.newline_id());
    for (auto p : ex.meta) CHECK(ex.ids[p] == v.meta_id());
    CHECK(ex.meta.size() == 2);

    // prompt logits never enter the loss: perturbing prompt rows leaves it unchanged
    Model<float> m(small_config(v));
    std::vector<FinetuneExample> batch{ex, make_example(v, gen_parity_bits(9, rng))};
    Tape<float> t1;
    const float base = t1.value(finetune_loss(t1, m, batch, {}))[0];
    ForwardOptions all;
    std::size_t total = 0;
    for (const auto& e : batch) total += e.ids.size();
    for (std::size_t r = 0; r < total; ++r) all.logit_rows.push_back(r);
    Tape<float> t2;
    Var logits = m.forward(t2, std::vector<Sequence>{{batch[0].ids, batch[0].meta}, {batch[1].ids, batch[1].meta}}, all);
    auto full = t2.value(logits);
    // recompute the loss by hand from the full logits after scrambling prompt rows
    std::mt19937_64 noise(1);
    std::normal_distribution<float> nd(0.0f, 50.0f);
    const std::size_t V = v.size();
    std::vector<std::uint8_t> loss_row(total, 0);
    std::vector<std::size_t> row_target(total, 0);
    std::size_t offset = 0;
    for (const auto& e : batch) {
        for (auto [row, target] : finetune_targets(e)) loss_row[offset + row] = 1, row_target[offset + row] = target;
        offset += e.ids.size();
    }
    for (std::size_t r = 0; r < total; ++r)
        if (!loss_row[r])
            for (std::size_t c = 0; c < V; ++c) full.values[r * V + c] += nd(noise);
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < total; ++r) {
        if (!loss_row[r]) continue;
        double mx = -1e30;
        for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, static_cast<double>(full.values[r * V + c]));
        double z = 0;
        for (std::size_t c = 0; c < V; ++c) z += std::exp(static_cast<double>(full.values[r * V + c]) - mx);
        sum += -(static_cast<double>(full.values[r * V + row_target[r]]) - mx - std::log(z));
        ++count;
    }
    CHECK(sum / static_cast<double>(count) == doctest::Approx(base).epsilon(1e-5));

    // gradient at prompt rows is exactly zero
    Tape<float> t3;
    ForwardOptions fo = all;
    Var lg = m.forward(t3, std::vector<Sequence>{{batch[0].ids, batch[0].meta}, {batch[1].ids, batch[1].meta}}, fo);
    std::vector<std::size_t> targets(total, 0);
    std::vector<std::uint8_t> mask(loss_row);
    for (std::size_t r = 0; r < total; ++r) targets[r] = row_target[r];
    Var l = ops::cross_entropy_masked(t3, lg, targets, mask);
    CHECK(t3.value(l)[0] == doctest::Approx(base).epsilon(1e-5));
    t3.backward(l);
    const auto& g = t3.grad(lg);
    for (std::size_t r = 0; r < total; ++r)
        if (!loss_row[r])
            for (std::size_t c = 0; c < V; ++c) REQUIRE(g[r * V + c] == 0.0f);
}

TEST_CASE("fine-tuning") {
    const auto& v = shared_vocab();
    std::mt19937_64 rng(6);
    Model<float> m(small_config(v));
    auto p1 = make_dataset(Task::Parity, 1, 20, rng);
    SUBCASE("empty dataset is an error") {
        CHECK_THROWS_WITH_AS(finetune(m, v, {}, short_run(2)), doctest::Contains("empty dataset"), std::invalid_argument);
        CHECK_THROWS_WITH_AS(finetune(m, v, {p1, {}}, short_run(2)), doctest::Contains("empty dataset"),
                             std::invalid_argument);
    }
    SUBCASE("phases run in order and change parameters") {
        auto p2 = make_dataset(Task::ListRecall, 1, 20, rng);
        const auto before = flat_params(m);
        std::vector<std::size_t> evals;
        TrainHooks h;
        h.on_eval = [&](std::size_t s) { evals.push_back(s); };
        auto cfg = short_run(4);
        cfg.eval_interval = 2;
        auto res = finetune(m, v, {p1, p2}, cfg, h);
        CHECK(res.steps == 4);
        CHECK(evals == std::vector<std::size_t>{2, 4});
        CHECK(flat_params(m) != before);
        for (const auto& l : res.log) CHECK(std::isfinite(l.loss));
        const auto dir = std::filesystem::temp_directory_path() / "metatok_train_test";
        std::filesystem::create_directories(dir);
        write_metrics_csv(res.log, dir / "metrics.csv");
        std::ifstream f(dir / "metrics.csv");
        std::string header;
        std::getline(f, header);
        CHECK(header == "step,loss,lr,grad_norm,eval_loss,elapsed_s");
        std::filesystem::remove_all(dir);
    }
    SUBCASE("model and vocabulary must agree") {
        auto c = small_config(v);
        c.vocab_size += 1;
        Model<float> other(c);
        CHECK_THROWS_AS(finetune(other, v, {p1}, short_run(2)), std::invalid_argument);
    }
}

TEST_CASE("answer scoring") {
    const auto& v = shared_vocab();
    auto ids = [&](const std::string& s) { return v.encode(s); };
    auto s = score_answer(v, "blue red green", ids("blue red green"));
    CHECK(s.token_accuracy == 1.0);
    CHECK(s.exact);
    s = score_answer(v, "blue red green", ids("blue green green"));
    CHECK(s.token_accuracy == doctest::Approx(2.0 / 3.0));
    CHECK(!s.exact);
    s = score_answer(v, "blue red", ids("blue _PAUSE_ red"));
    CHECK(s.exact);
    s = score_answer(v, "blue", {});
    CHECK(s.token_accuracy == 0.0);
    CHECK(!s.exact);
}

TEST_CASE("evaluation with stub predictors") {
    const auto& v = shared_vocab();
    std::mt19937_64 rng(12);
    std::vector<TaskInstance> test;
    for (int ph = 1; ph <= 3; ++ph) {
        auto part = make_dataset(Task::ListRecall, ph, 30, rng);
        test.insert(test.end(), part.begin(), part.end());
    }
    std::map<std::vector<std::size_t>, std::vector<std::size_t>> gold;
    for (const auto& t : test) gold[v.encode(t.prompt)] = v.encode(t.answer);
    Predictor oracle_stub = [&](const std::vector<std::size_t>& p, std::size_t) { return gold.at(p); };
    Predictor empty_stub = [](const std::vector<std::size_t>&, std::size_t) { return std::vector<std::size_t>{}; };

    auto rep = evaluate(v, oracle_stub, test, kDefaultBins);
    CHECK(rep.task == "list_recall");
    std::size_t n = 0;
    for (const auto& b : rep.bins) {
        n += b.count;
        if (b.count) {
            CHECK(b.token_accuracy == 100.0);
            CHECK(b.sequence_accuracy == 100.0);
        }
    }
    CHECK(n + rep.skipped == test.size());
    CHECK(n > 0);
    auto zero = evaluate(v, empty_stub, test, kDefaultBins);
    for (const auto& b : zero.bins) {
        CHECK(b.token_accuracy == 0.0);
        CHECK(b.sequence_accuracy == 0.0);
    }
    CHECK_THROWS_AS(evaluate(v, empty_stub, {}, kDefaultBins), std::invalid_argument);

    Model<float> m(small_config(v));
    auto small = std::vector<TaskInstance>(test.begin(), test.begin() + 6);
    auto r1 = evaluate_model(m, v, small, {64, 128, 256});
    auto r2 = evaluate_model(m, v, small, {64, 128, 256});
    for (std::size_t i = 0; i < r1.bins.size(); ++i) {
        CHECK(r1.bins[i].count == r2.bins[i].count);
        CHECK(r1.bins[i].token_accuracy == r2.bins[i].token_accuracy);
    }
    r1.train_len = 256;
    const auto csv = eval_csv({r1});
    CHECK(csv.rfind("task,train_len,eval_bin,count,token_accuracy,sequence_accuracy\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("inference benchmark") {
    const auto& v = shared_vocab();
    auto c = small_config(v);
    c.pe.mode = PEMode::ROPE;
    Model<float> m(c);
    std::mt19937_64 rng(3);
    std::vector<std::vector<std::size_t>> prompts;
    for (int i = 0; i < 4; ++i) prompts.push_back(v.encode(gen_parity_bits(20, rng).prompt));
    BenchOptions o;
    o.runs = 5;
    o.new_tokens = 8;
    auto r = bench_inference(m, prompts, true, o);
    CHECK(r.tokens_per_second > 0);
    CHECK(r.time_to_first_token_ms > 0);
    CHECK(r.runs == 5);
    auto [without, with] = bench_compare(m, prompts, o);
    CHECK(with.slowdown_factor > 0);
    CHECK(std::isfinite(with.slowdown_factor));
    const auto csv = bench_csv(without, with);
    CHECK(csv.rfind("Metric,No meta/pause tokens,With meta/pause tokens\n", 0) == 0);
    CHECK(csv.find("TTFT (ms)") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    o.new_tokens = 1;
    CHECK_THROWS_AS(bench_inference(m, prompts, true, o), std::invalid_argument);
}
