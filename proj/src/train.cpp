#include "metatok/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace metatok {

void TrainConfig::validate() const {
    if (!(min_lr > 0.0 && min_lr <= lr)) throw std::invalid_argument("train: need 0 < min_lr <= lr");
    if (warmup_iters >= max_iters) throw std::invalid_argument("train: warmup_iters must be below max_iters");
    if (batch_size == 0 || grad_accum == 0) throw std::invalid_argument("train: batch_size and grad_accum must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("train: betas must lie in [0, 1)");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("train: grad_clip must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be non-negative");
    if (eval_interval == 0) throw std::invalid_argument("train: eval_interval must be positive");
}

double lr_at(const TrainConfig& c, std::size_t step) {
    if (step < c.warmup_iters) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_iters);
    if (step >= c.max_iters) return c.min_lr;
    const double ratio =
        static_cast<double>(step - c.warmup_iters) / static_cast<double>(c.max_iters - c.warmup_iters);
    return c.min_lr + 0.5 * (1.0 + std::cos(std::numbers::pi * ratio)) * (c.lr - c.min_lr);
}

template <typename T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm) {
    double sq = 0;
    for (std::size_t i = 0; i < store.size(); ++i)
        for (T g : store[i].grad) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
    if (norm > max_norm) {
        // a hair under the bound so rounding never lands above it
        const T s = static_cast<T>(max_norm / norm * (1.0 - 1e-7));
        for (std::size_t i = 0; i < store.size(); ++i)
            for (T& g : store[i].grad) g *= s;
    }
    return norm;
}

template double clip_grad_norm(ParameterStore<float>&, double);
template double clip_grad_norm(ParameterStore<double>&, double);

template <typename T>
AdamW<T>::AdamW(ParameterStore<T>& store, const TrainConfig& cfg) : store_(store), cfg_(cfg) {
    for (std::size_t i = 0; i < store_.size(); ++i) {
        m_.emplace_back(store_[i].value.size(), 0.0f);
        v_.emplace_back(store_[i].value.size(), 0.0f);
    }
}

template <typename T>
void AdamW<T>::step(double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < store_.size(); ++i) {
        auto& p = store_[i];
        auto& m = m_[i];
        auto& v = v_[i];
        const double wd = p.decay ? cfg_.weight_decay : 0.0;
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = static_cast<double>(p.grad[j]);
            const double mj = b1 * m[j] + (1.0 - b1) * g;
            const double vj = b2 * v[j] + (1.0 - b2) * g * g;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double w = static_cast<double>(p.value.values[j]);
            const double update = (mj / c1) / (std::sqrt(vj / c2) + cfg_.eps) + wd * w;
            p.value.values[j] = static_cast<T>(w - lr * update);
        }
    }
}

template <typename T>
OptimizerState AdamW<T>::state() const {
    return OptimizerState{t_, m_, v_};
}

template <typename T>
void AdamW<T>::load_state(const OptimizerState& s) {
    if (s.m.size() != m_.size() || s.v.size() != v_.size()) throw ShapeError("optimizer state does not match parameters");
    for (std::size_t i = 0; i < m_.size(); ++i)
        if (s.m[i].size() != m_[i].size() || s.v[i].size() != v_[i].size())
            throw ShapeError("optimizer state does not match " + store_[i].name);
    t_ = s.step;
    m_ = s.m;
    v_ = s.v;
}

template class AdamW<float>;
template class AdamW<double>;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Var packed_lm_loss(Tape<float>& tape, Model<float>& model, std::span<const Sequence> batch, const ForwardOptions& opt) {
    std::vector<std::size_t> targets;
    std::vector<std::uint8_t> mask;
    for (const auto& s : batch) {
        auto t = lm_targets(s.ids, s.meta_positions, model.config().retarget_loss);
        targets.insert(targets.end(), t.targets.begin(), t.targets.end());
        mask.insert(mask.end(), t.mask.begin(), t.mask.end());
    }
    Var logits = model.forward(tape, batch, opt);
    return ops::cross_entropy_masked(tape, logits, targets, mask);
}

Sequence sample_window(const std::vector<std::size_t>& tokens, std::size_t begin, std::size_t end, std::size_t n,
                       const ModelConfig& mc, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> start(begin, end - n);
    const std::size_t s = start(rng);
    std::vector<std::size_t> win(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                                 tokens.begin() + static_cast<std::ptrdiff_t>(s + n));
    auto inj = inject_meta(win, mc.meta_fraction, mc.meta_id, rng, mc.block_size);
    return Sequence{std::move(inj.ids), std::move(inj.meta_positions)};
}

template <typename Step>
void guarded(std::size_t step, Step&& body) {
    try {
        body();
    } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
}

}  // namespace

std::size_t pretrain_window(const ModelConfig& cfg) {
    auto n = static_cast<std::size_t>(std::floor(static_cast<double>(cfg.block_size) / (1.0 + cfg.meta_fraction)));
    while (n > 1 && n + static_cast<std::size_t>(std::floor(cfg.meta_fraction * static_cast<double>(n))) > cfg.block_size)
        --n;
    return n;
}

TrainResult pretrain(Model<float>& model, const std::vector<std::size_t>& tokens, const TrainConfig& cfg,
                     const TrainHooks& hooks, OptimizerState* opt_state) {
    cfg.validate();
    const auto& mc = model.config();
    const std::size_t n = pretrain_window(mc);
    const std::size_t split = tokens.size() - tokens.size() / 10;
    if (split < n + 1 || tokens.size() - split < n + 1)
        throw std::invalid_argument("pretrain: corpus too small for the window of " + std::to_string(n) + " tokens");
    for (auto t : tokens)
        if (t >= mc.vocab_size) throw std::out_of_range("pretrain: token id outside vocabulary");

    auto& store = model.params();
    AdamW<float> opt(store, cfg);
    if (opt_state && !opt_state->m.empty()) opt.load_state(*opt_state);
    std::mt19937_64 rng(cfg.seed);

    auto eval_loss = [&] {
        std::mt19937_64 erng(cfg.seed ^ 0xe7a1ULL);
        double total = 0;
        for (std::size_t b = 0; b < cfg.eval_batches; ++b) {
            std::vector<Sequence> batch;
            for (std::size_t i = 0; i < cfg.batch_size; ++i)
                batch.push_back(sample_window(tokens, split, tokens.size(), n, mc, erng));
            Tape<float> tape;
            ForwardOptions fo;
            fo.rng = &erng;
            total += static_cast<double>(tape.value(packed_lm_loss(tape, model, batch, fo))[0]);
        }
        return total / static_cast<double>(cfg.eval_batches);
    };

    TrainResult res;
    const auto t0 = Clock::now();
    res.initial_eval_loss = eval_loss();
    const std::size_t start = opt.steps();
    for (std::size_t step = start; step < cfg.max_iters; ++step) {
        StepLog log;
        log.step = step;
        log.lr = lr_at(cfg, step);
        guarded(step, [&] {
            store.zero_grad();
            double loss = 0;
            for (std::size_t a = 0; a < cfg.grad_accum; ++a) {
                std::vector<Sequence> batch;
                for (std::size_t i = 0; i < cfg.batch_size; ++i) batch.push_back(sample_window(tokens, 0, split, n, mc, rng));
                Tape<float> tape;
                ForwardOptions fo;
                fo.training = true;
                fo.rng = &rng;
                Var l = packed_lm_loss(tape, model, batch, fo);
                loss += static_cast<double>(tape.value(l)[0]);
                tape.backward(ops::scale(tape, l, 1.0f / static_cast<float>(cfg.grad_accum)));
            }
            log.loss = loss / static_cast<double>(cfg.grad_accum);
            if (!std::isfinite(log.loss)) throw NumericError("loss is not finite");
            log.grad_norm = clip_grad_norm(store, cfg.grad_clip);
            opt.step(log.lr);
        });
        const bool last = step + 1 == cfg.max_iters;
        if ((step + 1) % cfg.eval_interval == 0 || last) {
            log.eval_loss = eval_loss();
            if (hooks.on_eval) hooks.on_eval(step + 1);
        }
        log.elapsed_s = seconds_since(t0);
        if (hooks.on_log && (step % cfg.log_interval == 0 || log.eval_loss || last)) hooks.on_log(log);
        res.log.push_back(log);
    }
    res.steps = cfg.max_iters - start;
    res.final_eval_loss = res.log.empty() ? res.initial_eval_loss : *res.log.back().eval_loss;
    if (opt_state) *opt_state = opt.state();
    return res;
}

FinetuneExample make_example(const Vocab& vocab, const TaskInstance& inst) {
    FinetuneExample ex;
    ex.ids = vocab.encode(inst.prompt);
    ex.prompt_len = ex.ids.size();
    auto ans = vocab.encode(inst.answer);
    if (ans.empty()) throw std::invalid_argument("fine-tune example with an empty answer");
    ex.ids.insert(ex.ids.end(), ans.begin(), ans.end());
    ex.ids.push_back(vocab.newline_id());
    ex.meta = meta_positions_of(ex.ids, vocab.meta_id());
    return ex;
}

std::vector<std::pair<std::size_t, std::size_t>> finetune_targets(const FinetuneExample& ex) {
    std::vector<std::uint8_t> is_meta(ex.ids.size(), 0);
    for (auto p : ex.meta) is_meta[p] = 1;
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t t = ex.prompt_len; t < ex.ids.size(); ++t)
        if (!is_meta[t]) out.emplace_back(t - 1, ex.ids[t]);
    return out;
}

Var finetune_loss(Tape<float>& tape, Model<float>& model, std::span<const FinetuneExample> batch,
                  const ForwardOptions& opt) {
    std::vector<Sequence> seqs;
    ForwardOptions fo = opt;
    fo.logit_rows.clear();
    std::vector<std::size_t> targets;
    std::size_t base = 0;
    for (const auto& ex : batch) {
        seqs.push_back({ex.ids, ex.meta});
        for (auto [row, target] : finetune_targets(ex)) {
            fo.logit_rows.push_back(base + row);
            targets.push_back(target);
        }
        base += ex.ids.size();
    }
    if (targets.empty()) throw std::invalid_argument("empty loss");
    Var logits = model.forward(tape, seqs, fo);
    std::vector<std::uint8_t> mask(targets.size(), 1);
    return ops::cross_entropy_masked(tape, logits, targets, mask);
}

TrainResult finetune(Model<float>& model, const Vocab& vocab, const std::vector<std::vector<TaskInstance>>& phases,
                     const TrainConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    const auto& mc = model.config();
    if (mc.meta_id != vocab.meta_id() || mc.newline_id != vocab.newline_id() || mc.vocab_size != vocab.size())
        throw std::invalid_argument("finetune: model and vocabulary disagree");
    if (phases.empty()) throw std::invalid_argument("finetune: empty dataset");
    std::vector<std::vector<FinetuneExample>> data;
    for (const auto& ph : phases) {
        if (ph.empty()) throw std::invalid_argument("finetune: empty dataset");
        data.emplace_back();
        for (const auto& inst : ph) {
            auto ex = make_example(vocab, inst);
            if (ex.ids.size() <= mc.max_context()) data.back().push_back(std::move(ex));
        }
        if (data.back().empty()) throw std::invalid_argument("finetune: no example fits the model context");
    }

    auto& store = model.params();
    AdamW<float> opt(store, cfg);
    std::mt19937_64 rng(cfg.seed);
    const std::size_t per_phase = cfg.max_iters / data.size();

    auto eval_loss = [&](const std::vector<FinetuneExample>& set) {
        double total = 0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < cfg.eval_batches; ++b) {
            const std::size_t lo = b * cfg.batch_size;
            if (lo >= set.size()) break;
            const std::size_t hi = std::min(set.size(), lo + cfg.batch_size);
            Tape<float> tape;
            total += static_cast<double>(
                tape.value(finetune_loss(tape, model, std::span(set).subspan(lo, hi - lo), {}))[0]);
            ++batches;
        }
        return total / static_cast<double>(batches);
    };

    TrainResult res;
    const auto t0 = Clock::now();
    res.initial_eval_loss = eval_loss(data.front());
    for (std::size_t step = 0; step < cfg.max_iters; ++step) {
        const std::size_t ph = std::min(step / per_phase, data.size() - 1);
        const auto& set = data[ph];
        StepLog log;
        log.step = step;
        log.lr = lr_at(cfg, step);
        guarded(step, [&] {
            store.zero_grad();
            double loss = 0;
            std::uniform_int_distribution<std::size_t> pick(0, set.size() - 1);
            for (std::size_t a = 0; a < cfg.grad_accum; ++a) {
                std::vector<FinetuneExample> batch;
                for (std::size_t i = 0; i < cfg.batch_size; ++i) batch.push_back(set[pick(rng)]);
                Tape<float> tape;
                ForwardOptions fo;
                fo.training = true;
                fo.rng = &rng;
                Var l = finetune_loss(tape, model, batch, fo);
                loss += static_cast<double>(tape.value(l)[0]);
                tape.backward(ops::scale(tape, l, 1.0f / static_cast<float>(cfg.grad_accum)));
            }
            log.loss = loss / static_cast<double>(cfg.grad_accum);
            if (!std::isfinite(log.loss)) throw NumericError("loss is not finite");
            log.grad_norm = clip_grad_norm(store, cfg.grad_clip);
            opt.step(log.lr);
        });
        const bool last = step + 1 == cfg.max_iters;
        if ((step + 1) % cfg.eval_interval == 0 || last) {
            log.eval_loss = eval_loss(set);
            if (hooks.on_eval) hooks.on_eval(step + 1);
        }
        log.elapsed_s = seconds_since(t0);
        if (hooks.on_log && (step % cfg.log_interval == 0 || log.eval_loss || last)) hooks.on_log(log);
        res.log.push_back(log);
    }
    res.steps = cfg.max_iters;
    res.final_eval_loss = *res.log.back().eval_loss;
    return res;
}

void write_metrics_csv(const std::vector<StepLog>& log, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "step,loss,lr,grad_norm,eval_loss,elapsed_s\n";
    for (const auto& l : log) {
        f << l.step << ',' << l.loss << ',' << l.lr << ',' << l.grad_norm << ',';
        if (l.eval_loss) f << *l.eval_loss;
        f << ',' << l.elapsed_s << '\n';
    }
}

// ---------------------------------------------------------------------------
// Evaluation

AnswerScore score_answer(const Vocab& vocab, const std::string& gold, std::span<const std::size_t> generated) {
    const auto want = vocab.encode(normalize_answer(gold));
    std::vector<std::size_t> got;
    for (auto id : generated)
        if (id != vocab.meta_id()) got.push_back(id);
    AnswerScore s;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < want.size(); ++i) hit += i < got.size() && got[i] == want[i];
    s.token_accuracy = want.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(want.size());
    s.exact = normalize_answer(vocab.decode(got)) == normalize_answer(gold);
    return s;
}

EvalReport evaluate(const Vocab& vocab, const Predictor& predict, const std::vector<TaskInstance>& testset,
                    const std::vector<std::size_t>& bin_edges, std::size_t max_context) {
    if (testset.empty()) throw std::invalid_argument("evaluate: empty test set");
    if (bin_edges.empty() || !std::is_sorted(bin_edges.begin(), bin_edges.end()))
        throw std::invalid_argument("evaluate: bin edges must be sorted and non-empty");
    EvalReport rep;
    rep.task = to_string(testset.front().task);
    for (std::size_t i = 0; i < bin_edges.size(); ++i) rep.bins.push_back({i ? bin_edges[i - 1] : 0, bin_edges[i], 0, 0, 0});

    const auto n = static_cast<std::ptrdiff_t>(testset.size());
    std::vector<int> bin_of(testset.size(), -1);
    std::vector<AnswerScore> scores(testset.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto& inst = testset[static_cast<std::size_t>(i)];
        const auto prompt = vocab.encode(inst.prompt);
        const std::size_t max_new = vocab.encode(inst.answer).size() + 2;
        const auto it = std::lower_bound(bin_edges.begin(), bin_edges.end(), prompt.size());
        if (it == bin_edges.end() || prompt.size() + max_new > max_context) continue;
        bin_of[static_cast<std::size_t>(i)] = static_cast<int>(it - bin_edges.begin());
        scores[static_cast<std::size_t>(i)] = score_answer(vocab, inst.answer, predict(prompt, max_new));
    }
    // serial reduction keeps the sums order-independent of the schedule
    for (std::size_t i = 0; i < testset.size(); ++i) {
        if (bin_of[i] < 0) {
            ++rep.skipped;
            continue;
        }
        auto& b = rep.bins[static_cast<std::size_t>(bin_of[i])];
        ++b.count;
        b.token_accuracy += scores[i].token_accuracy;
        b.sequence_accuracy += scores[i].exact ? 1.0 : 0.0;
    }
    for (auto& b : rep.bins)
        if (b.count) {
            b.token_accuracy *= 100.0 / static_cast<double>(b.count);
            b.sequence_accuracy *= 100.0 / static_cast<double>(b.count);
        }
    return rep;
}

EvalReport evaluate_model(const Model<float>& model, const Vocab& vocab, const std::vector<TaskInstance>& testset,
                          const std::vector<std::size_t>& bin_edges, MetaKernel kernel) {
    Predictor p = [&](const std::vector<std::size_t>& prompt, std::size_t max_new) {
        return generate(model, prompt, max_new, kernel);
    };
    return evaluate(vocab, p, testset, bin_edges, model.config().max_context());
}

std::string eval_csv(const std::vector<EvalReport>& reports) {
    std::ostringstream o;
    o << "task,train_len,eval_bin,count,token_accuracy,sequence_accuracy\n";
    for (const auto& r : reports)
        for (const auto& b : r.bins)
            o << r.task << ',' << r.train_len << ',' << b.hi << ',' << b.count << ',' << b.token_accuracy << ','
              << b.sequence_accuracy << '\n';
    return o.str();
}

// ---------------------------------------------------------------------------
// Benchmark

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::size_t argmax(const std::vector<float>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

BenchReport bench_inference(const Model<float>& model, const std::vector<std::vector<std::size_t>>& prompts,
                            bool with_meta, const BenchOptions& opt) {
    if (prompts.empty()) throw std::invalid_argument("bench: no prompts");
    if (opt.runs == 0 || opt.new_tokens < 2) throw std::invalid_argument("bench: need runs >= 1 and new_tokens >= 2");
    const auto& cfg = model.config();
    std::vector<double> tps, ttft;
    for (std::size_t r = 0; r <= opt.runs; ++r) {
        std::vector<std::size_t> prompt;
        for (auto id : prompts[r % prompts.size()])
            if (with_meta || id != cfg.meta_id) prompt.push_back(id);
        if (prompt.empty()) throw std::invalid_argument("bench: empty prompt");
        if (prompt.size() + opt.new_tokens > cfg.max_context()) throw std::length_error("context overflow");
        InferenceSession<float> s(model, opt.kernel, 0, with_meta);
        const auto t0 = Clock::now();
        std::size_t tok = argmax(s.feed(prompt));
        const auto t1 = Clock::now();
        for (std::size_t i = 1; i < opt.new_tokens; ++i) tok = argmax(s.feed(std::span<const std::size_t>(&tok, 1)));
        const auto t2 = Clock::now();
        if (r == 0) continue;  // warmup
        ttft.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        tps.push_back(static_cast<double>(opt.new_tokens - 1) / std::chrono::duration<double>(t2 - t1).count());
    }
    BenchReport rep;
    rep.tokens_per_second = median(tps);
    rep.time_to_first_token_ms = median(ttft);
    rep.runs = opt.runs;
    return rep;
}

std::pair<BenchReport, BenchReport> bench_compare(const Model<float>& model,
                                                  const std::vector<std::vector<std::size_t>>& prompts,
                                                  const BenchOptions& opt) {
    // interleave the two settings so drift in machine load hits both alike
    BenchOptions one = opt;
    one.runs = 1;
    std::vector<double> tps0, tps1, tt0, tt1;
    bench_inference(model, prompts, false, one);
    bench_inference(model, prompts, true, one);
    for (std::size_t r = 0; r < opt.runs; ++r) {
        std::vector<std::vector<std::size_t>> p{prompts[r % prompts.size()]};
        auto a = bench_inference(model, p, false, one);
        auto b = bench_inference(model, p, true, one);
        tps0.push_back(a.tokens_per_second), tt0.push_back(a.time_to_first_token_ms);
        tps1.push_back(b.tokens_per_second), tt1.push_back(b.time_to_first_token_ms);
    }
    BenchReport without{median(tps0), median(tt0), 1.0, opt.runs};
    BenchReport with{median(tps1), median(tt1), 1.0, opt.runs};
    with.slowdown_factor = without.tokens_per_second / with.tokens_per_second;
    return {without, with};
}

std::string bench_csv(const BenchReport& without, const BenchReport& with) {
    std::ostringstream o;
    o.setf(std::ios::fixed);
    o.precision(2);
    o << "Metric,No meta/pause tokens,With meta/pause tokens\n";
    o << "TPS (tokens/sec)," << without.tokens_per_second << ',' << with.tokens_per_second << '\n';
    o << "TTFT (ms)," << without.time_to_first_token_ms << ',' << with.time_to_first_token_ms << '\n';
    o << "Slowdown factor," << without.slowdown_factor << ',' << with.slowdown_factor << '\n';
    return o.str();
}

}  // namespace metatok
