#include "metatok/commands.hpp"

#include <chrono>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

#include "metatok/ablation.hpp"
#include "metatok/corpus.hpp"
#include "metatok/model.hpp"
#include "metatok/probes.hpp"
#include "metatok/train.hpp"

namespace metatok {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json bins_json(const EvalReport& r) {
    json bins = json::array();
    for (const auto& b : r.bins)
        bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"token_accuracy", b.token_accuracy},
                        {"sequence_accuracy", b.sequence_accuracy}});
    return {{"task", r.task}, {"train_len", r.train_len}, {"skipped", r.skipped}, {"bins", bins}};
}

std::string task_label(const std::vector<Task>& tasks) {
    std::string s;
    for (auto t : tasks) s += (s.empty() ? "" : "+") + to_string(t);
    return s;
}

// Checkpoint architecture wins; inference-time positional settings come from the run config.
ModelConfig runtime_config(ModelConfig base, const RunConfig& cfg) {
    const ModelConfig rc = cfg.model();
    base.pe.noise_sigma = rc.pe.noise_sigma;
    base.pe.zero_at_meta = rc.pe.zero_at_meta;
    base.pe.zero_embed_at_meta = rc.pe.zero_embed_at_meta;
    if (rc.pe.yarn) base.pe.yarn = rc.pe.yarn;
    return base;
}

std::unique_ptr<Model<float>> resolve_model(const RunConfig& cfg, const Vocab& vocab, std::ostream& log,
                                            OptimizerState* opt = nullptr, std::size_t* step = nullptr) {
    const auto ck = cfg.get("checkpoint");
    if (!ck.empty()) {
        Model<float> loaded = load_checkpoint<float>(ck, step, opt);
        if (loaded.config().vocab_size != vocab.size())
            throw ConfigError("checkpoint vocabulary size " + std::to_string(loaded.config().vocab_size) +
                              " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
        log << "loaded checkpoint " << ck << "\n";
        return clone_with(loaded, runtime_config(loaded.config(), cfg));
    }
    ModelConfig mc = cfg.model();
    if (mc.vocab_size == 0) mc.vocab_size = vocab.size();
    if (mc.vocab_size != vocab.size())
        throw ConfigError("vocab_size " + std::to_string(mc.vocab_size) + " does not match the vocabulary (" +
                          std::to_string(vocab.size()) + ")");
    mc.meta_id = vocab.meta_id();
    mc.newline_id = vocab.newline_id();
    try {
        mc.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    log << "fresh model, " << analytic_parameter_count(mc) << " parameters\n";
    return std::make_unique<Model<float>>(mc);
}

std::vector<TaskInstance> read_files(const std::vector<std::string>& files) {
    std::vector<TaskInstance> all;
    for (const auto& f : files) {
        auto part = read_dataset(f);
        all.insert(all.end(), part.begin(), part.end());
    }
    return all;
}

std::vector<std::vector<TaskInstance>> training_phases(const RunConfig& cfg) {
    std::vector<std::vector<TaskInstance>> phases;
    const auto files = cfg.get_string_list("data");
    if (!files.empty()) {
        for (const auto& f : files) phases.push_back(read_dataset(f));
        return phases;
    }
    for (int p : cfg.phases()) {
        std::vector<TaskInstance> phase;
        for (auto t : cfg.tasks()) {
            auto part = generate_split(t, p, cfg.get_uint("count"), cfg.get_uint("seed"), 0);
            phase.insert(phase.end(), part.begin(), part.end());
        }
        phases.push_back(std::move(phase));
    }
    return phases;
}

std::vector<TaskInstance> test_set(const RunConfig& cfg) {
    const auto files = cfg.get_string_list("test_data");
    if (!files.empty()) return read_files(files);
    std::vector<TaskInstance> all;
    for (int p : cfg.phases())
        for (auto t : cfg.tasks()) {
            auto part = generate_split(t, p, cfg.get_uint("test_count"), cfg.get_uint("seed"), 1);
            all.insert(all.end(), part.begin(), part.end());
        }
    if (all.empty()) throw ConfigError("empty evaluation set");
    return all;
}

std::size_t longest_prompt(const std::vector<std::vector<TaskInstance>>& phases) {
    std::size_t n = 0;
    for (const auto& ph : phases)
        for (const auto& inst : ph) n = std::max(n, prompt_pieces(inst.prompt));
    return n;
}

TrainHooks logging_hooks(std::ostream& log) {
    TrainHooks h;
    h.on_log = [&log](const StepLog& l) {
        log << "step " << l.step << " loss " << l.loss << " lr " << l.lr << " grad_norm " << l.grad_norm;
        if (l.eval_loss) log << " eval_loss " << *l.eval_loss;
        log << " elapsed " << l.elapsed_s << "s\n";
    };
    return h;
}

json log_json(const TrainResult& r) {
    return {{"steps", r.steps}, {"initial_eval_loss", r.initial_eval_loss}, {"final_eval_loss", r.final_eval_loss}};
}

void save_model(const Model<float>& m, const Vocab& vocab, std::size_t step, const fs::path& dir,
                const OptimizerState* opt) {
    save_checkpoint(m, step, dir, opt);
    vocab.save(dir / "vocab.txt");
}

// ---------------------------------------------------------------------------

bool cmd_gen_data(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    json files = json::array();
    for (auto t : cfg.tasks())
        for (int p : cfg.phases()) {
            const auto stem = to_string(t) + "-phase" + std::to_string(p);
            for (int split = 0; split < 2; ++split) {
                const auto n = cfg.get_uint(split == 0 ? "count" : "test_count");
                if (n == 0) continue;
                const auto path = dir / (stem + (split == 0 ? "-train.jsonl" : "-test.jsonl"));
                write_dataset(generate_split(t, p, n, cfg.get_uint("seed"), split), path);
                files.push_back({{"task", to_string(t)}, {"phase", p}, {"split", split == 0 ? "train" : "test"},
                                 {"count", n}, {"path", path.filename().string()}});
                log << "wrote " << path.string() << " (" << n << " instances)\n";
            }
        }
    write_json(dir / "report.json", {{"files", files}});
    return true;
}

bool cmd_pretrain(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    const Vocab vocab = resolve_vocab(cfg);
    OptimizerState opt;
    std::size_t step0 = 0;
    auto model = resolve_model(cfg, vocab, log, &opt, &step0);
    const auto corpus = pretraining_corpus(cfg.get_uint("pretrain_sentences"), cfg.get_uint("seed"));
    const auto tokens = vocab.encode(corpus);
    log << "pretraining corpus: " << tokens.size() << " tokens\n";
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = pretrain(*model, tokens, cfg.train(), logging_hooks(log), &opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_model(*model, vocab, opt.step, dir / "checkpoint", &opt);
    write_metrics_csv(r.log, dir / "metrics.csv");
    json rep = log_json(r);
    rep["corpus_tokens"] = tokens.size();
    rep["start_step"] = step0;
    rep["seconds"] = secs;
    rep["checkpoint"] = "checkpoint";
    write_json(dir / "report.json", rep);
    return true;
}

bool cmd_finetune(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    const Vocab vocab = resolve_vocab(cfg);
    auto model = resolve_model(cfg, vocab, log);
    const auto phases = training_phases(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = finetune(*model, vocab, phases, cfg.train(), logging_hooks(log));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_model(*model, vocab, r.steps, dir / "checkpoint", nullptr);
    write_metrics_csv(r.log, dir / "metrics.csv");

    const auto test = test_set(cfg);
    EvalReport eval = evaluate_model(*model, vocab, test, cfg.get_uint_list("bins"), cfg.kernel("kernel"));
    eval.task = task_label(cfg.tasks());
    eval.train_len = longest_prompt(phases);
    write_text(dir / "eval.csv", eval_csv({eval}));
    json rep = log_json(r);
    rep["seconds"] = secs;
    rep["phases"] = phases.size();
    rep["eval"] = bins_json(eval);
    rep["checkpoint"] = "checkpoint";
    write_json(dir / "report.json", rep);
    log << eval_csv({eval});
    return true;
}

bool cmd_eval(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    const Vocab vocab = resolve_vocab(cfg);
    auto model = resolve_model(cfg, vocab, log);
    const auto test = test_set(cfg);
    EvalReport eval = evaluate_model(*model, vocab, test, cfg.get_uint_list("bins"), cfg.kernel("kernel"));
    eval.task = task_label(cfg.tasks());
    eval.train_len = model->config().block_size;
    write_text(dir / "eval.csv", eval_csv({eval}));
    write_json(dir / "report.json", bins_json(eval));
    log << eval_csv({eval});
    return true;
}

bool cmd_ablate(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    const Vocab vocab = resolve_vocab(cfg);
    auto model = resolve_model(cfg, vocab, log);
    const auto test = test_set(cfg);
    const auto bins = cfg.get_uint_list("bins");
    const AblationResult ab = run_ablation(*model, vocab, test, bins, cfg.ablation_modes());
    const auto table = ablation_csv(ab);
    write_text(dir / "ablation.csv", table);
    log << table;

    json rep;
    rep["label"] = ab.label;
    for (std::size_t i = 0; i < ab.modes.size(); ++i) rep["modes"][to_string(ab.modes[i])] = bins_json(ab.reports[i]);
    const auto sigmas = cfg.get_double_list("noise_grid");
    if (!sigmas.empty()) {
        const NoiseSweep ns = noise_sweep(*model, vocab, test, bins, sigmas);
        write_text(dir / "noise.csv", noise_csv(ns));
        log << noise_csv(ns);
        rep["noise"] = {{"monotone_nonincreasing", ns.monotone_nonincreasing}, {"rises", ns.rises},
                        {"spearman", ns.spearman}, {"drop", ns.drop}};
        for (const auto& p : ns.points)
            rep["noise"]["points"].push_back({{"sigma", p.sigma}, {"token_accuracy", p.token_accuracy},
                                              {"sequence_accuracy", p.sequence_accuracy}});
    }
    write_json(dir / "report.json", rep);
    return true;
}

bool cmd_bench(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    const Vocab vocab = resolve_vocab(cfg);
    auto model = resolve_model(cfg, vocab, log);
    const auto test = test_set(cfg);
    std::vector<std::vector<std::size_t>> prompts;
    const std::size_t budget = model->config().max_context() - cfg.get_uint("bench_tokens");
    for (const auto& inst : test) {
        if (prompts.size() >= cfg.get_uint("bench_prompts")) break;
        const auto ex = make_example(vocab, inst);
        if (ex.prompt_len > budget) continue;
        prompts.emplace_back(ex.ids.begin(), ex.ids.begin() + static_cast<std::ptrdiff_t>(ex.prompt_len));
    }
    if (prompts.empty()) throw ConfigError("no evaluation prompt fits the model context");
    BenchOptions bo;
    bo.runs = cfg.get_uint("bench_runs");
    bo.new_tokens = cfg.get_uint("bench_tokens");
    bo.kernel = cfg.kernel("bench_kernel");
    const auto [without, with] = bench_compare(*model, prompts, bo);
    write_text(dir / "bench.csv", bench_csv(without, with));
    log << bench_csv(without, with);
    auto rj = [](const BenchReport& b) {
        return json{{"tokens_per_second", b.tokens_per_second}, {"time_to_first_token_ms", b.time_to_first_token_ms},
                    {"slowdown_factor", b.slowdown_factor}, {"runs", b.runs}};
    };
    write_json(dir / "report.json", {{"without_meta", rj(without)}, {"with_meta", rj(with)},
                                     {"kernel", cfg.get("bench_kernel")}, {"prompts", prompts.size()}});
    return true;
}

std::vector<Sequence> probe_sequences(const Model<float>& model, const Vocab& vocab,
                                      const std::vector<TaskInstance>& test, std::size_t limit) {
    std::vector<Sequence> out;
    for (const auto& inst : test) {
        if (out.size() >= limit) break;
        const auto ex = make_example(vocab, inst);
        if (ex.ids.size() > model.config().max_context() || ex.meta.empty()) continue;
        out.push_back({ex.ids, ex.meta});
    }
    return out;
}

bool cmd_probe(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    const std::string check = cfg.get("check");
    const std::vector<std::string> known = {"theorem41", "covariance", "boost", "similarity", "residuals", "bias"};
    if (check != "all" && std::find(known.begin(), known.end(), check) == known.end())
        throw ConfigError("check: unknown probe '" + check + "'");
    auto want = [&](const std::string& c) { return check == "all" || check == c; };
    json rep;
    bool all_passed = true;
    auto verdict = [&](const std::string& name, bool ok, const std::string& detail) {
        rep[name]["passed"] = ok;
        all_passed = all_passed && ok;
        log << name << ": " << (ok ? "PASS" : "FAIL") << " " << detail << "\n";
    };

    if (want("theorem41")) {
        std::mt19937_64 rng(cfg.get_uint("seed"));
        const auto grid = cfg.get_double_list("delta_grid");
        std::ostringstream csv;
        csv << "n,trials,strict_violations,monotone_violations,bound_checked,bound_violations,"
               "max_entropy_violation,max_bound_excess\n";
        bool ok = true;
        double worst = 0;
        for (auto n : cfg.get_uint_list("theorem_sizes")) {
            const auto r = theorem41_numeric(n, grid, cfg.get_uint("theorem_trials"), rng);
            csv << r.n << ',' << r.trials << ',' << r.strict_violations << ',' << r.monotone_violations << ','
                << r.bound_checked << ',' << r.bound_violations << ',' << r.max_entropy_violation << ','
                << r.max_bound_excess << '\n';
            ok = ok && r.passed();
            worst = std::max(worst, r.max_entropy_violation);
            rep["theorem41"]["sizes"].push_back({{"n", r.n}, {"trials", r.trials},
                                                 {"strict_violations", r.strict_violations},
                                                 {"monotone_violations", r.monotone_violations},
                                                 {"bound_checked", r.bound_checked},
                                                 {"bound_violations", r.bound_violations},
                                                 {"max_entropy_violation", r.max_entropy_violation},
                                                 {"max_bound_excess", r.max_bound_excess}});
        }
        write_text(dir / "theorem41.csv", csv.str());
        rep["theorem41"]["max_entropy_violation"] = worst;
        std::ostringstream d;
        d << "max_entropy_violation=" << worst;
        verdict("theorem41", ok, d.str());
    }
    if (want("covariance")) {
        std::mt19937_64 rng(cfg.get_uint("seed") + 1);
        std::normal_distribution<double> nd;
        double dev = 0, deriv = -1e300;
        for (auto n : cfg.get_uint_list("theorem_sizes")) {
            std::vector<double> logits(n);
            for (auto& x : logits) x = 2.0 * nd(rng);
            const auto argmax = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
            const auto r = cov_identity_check(logits, argmax);
            dev = std::max(dev, r.max_deviation);
            deriv = std::max(deriv, r.max_derivative);
        }
        rep["covariance"] = {{"max_deviation", dev}, {"max_derivative", deriv}};
        std::ostringstream d;
        d << "max_deviation=" << dev;
        verdict("covariance", dev < 1e-6, d.str());
    }
    if (want("bias")) {
        std::mt19937_64 rng(cfg.get_uint("seed") + 2);
        std::ostringstream csv;
        csv << "t,trial,residual_abs,residual_rel,residual_meta,inconclusive\n";
        double max_meta = 0, min_abs = 1e300, min_rel = 1e300;
        bool ok = true;
        for (auto t : cfg.get_uint_list("bias_len"))
            for (std::size_t k = 0; k < cfg.get_uint("bias_trials"); ++k) {
                const auto r = bias_expressivity(t, 2, rng);
                csv << t << ',' << k << ',' << r.residual_abs << ',' << r.residual_rel << ',' << r.residual_meta << ','
                    << (r.inconclusive ? "true" : "false") << '\n';
                if (r.inconclusive) {
                    ok = false;
                    continue;
                }
                max_meta = std::max(max_meta, r.residual_meta);
                min_abs = std::min(min_abs, r.residual_abs);
                min_rel = std::min(min_rel, r.residual_rel);
            }
        ok = ok && max_meta < 1e-8 && min_abs > 0.1 && min_rel > 0.1;
        write_text(dir / "bias.csv", csv.str());
        rep["bias"] = {{"max_residual_meta", max_meta}, {"min_residual_abs", min_abs}, {"min_residual_rel", min_rel}};
        std::ostringstream d;
        d << "max_meta=" << max_meta << " min_abs=" << min_abs << " min_rel=" << min_rel;
        verdict("bias", ok, d.str());
    }
    if (want("boost") || want("similarity") || want("residuals")) {
        const Vocab vocab = resolve_vocab(cfg);
        auto model = resolve_model(cfg, vocab, log);
        const auto seqs = probe_sequences(*model, vocab, test_set(cfg), cfg.get_uint("probe_count"));
        if (seqs.empty()) throw ConfigError("no evaluation sequence with meta tokens fits the model context");
        if (want("boost")) {
            const auto b = measure_boost(*model, seqs);
            std::ostringstream csv;
            csv << "sequence,query,key,delta,entropy_drop\n";
            for (const auto& r : b.rows)
                csv << r.sequence << ',' << r.query << ',' << r.key << ',' << r.delta << ',' << r.entropy_drop << '\n';
            write_text(dir / "boost.csv", csv.str());
            rep["boost"] = {{"layer", b.layer}, {"rows", b.rows.size()}, {"mean_delta", b.mean_delta},
                            {"mean_entropy_drop", b.mean_entropy_drop}, {"fraction_sharpened", b.fraction_sharpened}};
            log << "boost: mean_delta=" << b.mean_delta << " mean_entropy_drop=" << b.mean_entropy_drop
                << " fraction_sharpened=" << b.fraction_sharpened << "\n";
        }
        if (want("similarity")) {
            const auto map = caching_similarity(*model, seqs.front().ids, seqs.front().meta_positions);
            write_similarity(map, dir / "similarity");
            const auto prof = similarity_profile(map);
            rep["similarity"] = {{"near", prof.near}, {"far", prof.far}, {"near_count", prof.near_count},
                                 {"far_count", prof.far_count}, {"dir", "similarity"}};
            log << "similarity: near=" << prof.near << " far=" << prof.far << "\n";
        }
        if (want("residuals")) {
            const auto d = residual_dump(*model, seqs.front().ids, seqs.front().meta_positions, dir / "residuals");
            rep["residuals"] = {{"snapshots", d.layers.size()}, {"mean_norms", d.mean_norms}, {"dir", "residuals"}};
            log << "residuals: " << d.layers.size() << " snapshots written\n";
        }
    }
    rep["passed"] = all_passed;
    write_json(dir / "report.json", rep);
    log << "summary: " << (all_passed ? "PASS" : "FAIL") << "\n";
    return all_passed;
}

bool cmd_rd_sweep(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
    const Vocab vocab = resolve_vocab(cfg);
    auto model = resolve_model(cfg, vocab, log);
    const ProbeSet set = make_probe_set(*model, vocab, test_set(cfg));
    log << "probe set: " << set.meta.size() << " examples, " << set.classes.size() << " classes\n";
    const RDSweep s = rd_sweep(set, cfg.get_double_list("betas"), cfg.vib());
    write_text(dir / "rd.csv", rd_csv(s));
    log << rd_csv(s);
    auto curve = [](const std::vector<RDPoint>& c) {
        json a = json::array();
        for (const auto& p : c) a.push_back({{"beta", p.beta}, {"rate", p.rate}, {"distortion", p.distortion}});
        return a;
    };
    write_json(dir / "report.json",
               {{"meta", curve(s.meta)}, {"plain", curve(s.plain)}, {"meta_rate_monotone", s.meta_rate_monotone},
                {"plain_rate_monotone", s.plain_rate_monotone}, {"dominance_violations", s.dominance_violations},
                {"dominates", s.dominates()}, {"examples", set.meta.size()}, {"classes", set.classes.size()}});
    return true;
}

}  // namespace

std::vector<TaskInstance> generate_split(Task task, int phase, std::size_t count, std::uint64_t seed, int split) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(task), static_cast<std::uint32_t>(phase),
                      static_cast<std::uint32_t>(split)};
    std::mt19937_64 rng(seq);
    return make_dataset(task, phase, count, rng);
}

Vocab resolve_vocab(const RunConfig& cfg) {
    if (const auto& v = cfg.get("vocab"); !v.empty()) return Vocab::load(v);
    if (const auto& ck = cfg.get("checkpoint"); !ck.empty() && fs::exists(fs::path(ck) / "vocab.txt"))
        return Vocab::load(fs::path(ck) / "vocab.txt");
    return Vocab::build(vocab_corpus());
}

CommandResult run_command(const std::string& command, const RunConfig& cfg, std::ostream& log) {
    using Fn = bool (*)(const RunConfig&, const fs::path&, std::ostream&);
    Fn fn = nullptr;
    if (command == "gen-data") fn = cmd_gen_data;
    else if (command == "pretrain") fn = cmd_pretrain;
    else if (command == "finetune") fn = cmd_finetune;
    else if (command == "eval") fn = cmd_eval;
    else if (command == "ablate") fn = cmd_ablate;
    else if (command == "bench") fn = cmd_bench;
    else if (command == "probe") fn = cmd_probe;
    else if (command == "rd-sweep") fn = cmd_rd_sweep;
    else throw ConfigError("unknown command: " + command);

    // resolve typed views before creating the run directory so bad settings leave no trace
    (void)cfg.model();
    (void)cfg.train();
    (void)cfg.tasks();
    (void)cfg.phases();
    (void)cfg.ablation_modes();
    (void)cfg.kernel("kernel");
    (void)cfg.kernel("bench_kernel");

    CommandResult res;
    res.run_dir = make_run_dir(cfg.get("out"), command);
    write_text(res.run_dir / "config.txt", cfg.render());
    log << command << ": writing to " << res.run_dir.string() << "\n";
    try {
        res.passed = fn(cfg, res.run_dir, log);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw std::runtime_error(command + ": " + e.what());
    }
    return res;
}

}  // namespace metatok
