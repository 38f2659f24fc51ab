#pragma once

// Optimizer, schedules, the pretraining and fine-tuning loops, evaluation
// binned by prompt length, and the incremental-decoding benchmark.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "metatok/model.hpp"
#include "metatok/tasks.hpp"
#include "metatok/vocab.hpp"

namespace metatok {

struct TrainConfig {
    double lr = 6e-4;
    double min_lr = 6e-5;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double grad_clip = 1.0;
    std::size_t warmup_iters = 2000;
    std::size_t max_iters = 600000;
    std::size_t batch_size = 8;
    std::size_t grad_accum = 1;
    std::size_t eval_interval = 250;
    std::size_t eval_batches = 8;
    std::size_t log_interval = 10;
    std::uint64_t seed = 1337;

    void validate() const;
};

/// Linear warmup, lr·(step+1)/warmup, then cosine decay reaching min_lr at max_iters.
double lr_at(const TrainConfig& cfg, std::size_t step);

/// Scales gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm);

/// Adam with decoupled weight decay on parameters flagged for decay.
template <typename T>
class AdamW {
  public:
    AdamW(ParameterStore<T>& store, const TrainConfig& cfg);
    void step(double lr);
    std::size_t steps() const { return t_; }
    OptimizerState state() const;
    void load_state(const OptimizerState& s);

  private:
    ParameterStore<T>& store_;
    TrainConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

struct StepLog {
    std::size_t step = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
    std::optional<double> eval_loss;
    double elapsed_s = 0;
};

struct TrainHooks {
    std::function<void(const StepLog&)> on_log;
    // called every eval_interval steps and after the last one
    std::function<void(std::size_t step)> on_eval;
};

struct TrainResult {
    std::vector<StepLog> log;
    double initial_eval_loss = 0;
    double final_eval_loss = 0;
    std::size_t steps = 0;
};

/// Windows of n tokens with n + floor(k·n) <= block_size.
std::size_t pretrain_window(const ModelConfig& cfg);

/// Next-token training on a token stream; the last 10% is held out for eval loss.
/// Meta ids are injected afresh into every sampled window.
TrainResult pretrain(Model<float>& model, const std::vector<std::size_t>& tokens, const TrainConfig& cfg,
                     const TrainHooks& hooks = {}, OptimizerState* opt_state = nullptr);

struct FinetuneExample {
    std::vector<std::size_t> ids;   // prompt, answer, newline
    std::vector<std::size_t> meta;  // meta positions (prompt pauses)
    std::size_t prompt_len = 0;
};

FinetuneExample make_example(const Vocab& vocab, const TaskInstance& inst);

/// Rows that carry fine-tune loss (answer and newline targets, meta targets excluded) with their targets.
std::vector<std::pair<std::size_t, std::size_t>> finetune_targets(const FinetuneExample& ex);

/// Mean answer-token loss of a packed batch.
Var finetune_loss(Tape<float>& tape, Model<float>& model, std::span<const FinetuneExample> batch,
                  const ForwardOptions& opt);

/// Phases are trained in order, max_iters split evenly across them.
TrainResult finetune(Model<float>& model, const Vocab& vocab, const std::vector<std::vector<TaskInstance>>& phases,
                     const TrainConfig& cfg, const TrainHooks& hooks = {});

void write_metrics_csv(const std::vector<StepLog>& log, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Evaluation

struct AnswerScore {
    double token_accuracy = 0;  // fraction of gold tokens matched position by position
    bool exact = false;
};

/// Generated ids are compared after dropping meta ids.
AnswerScore score_answer(const Vocab& vocab, const std::string& gold, std::span<const std::size_t> generated);

struct BinStats {
    std::size_t lo = 0, hi = 0;  // prompt tokens in (lo, hi]
    std::size_t count = 0;
    double token_accuracy = 0;     // percent
    double sequence_accuracy = 0;  // percent
};

struct EvalReport {
    std::string task;
    std::size_t train_len = 0;
    std::vector<BinStats> bins;
    std::size_t skipped = 0;  // prompts longer than the last edge or the model context
};

inline const std::vector<std::size_t> kDefaultBins = {128, 256, 512, 1024, 2048};

using Predictor = std::function<std::vector<std::size_t>(const std::vector<std::size_t>& prompt, std::size_t max_new)>;

EvalReport evaluate(const Vocab& vocab, const Predictor& predict, const std::vector<TaskInstance>& testset,
                    const std::vector<std::size_t>& bin_edges, std::size_t max_context = SIZE_MAX);

EvalReport evaluate_model(const Model<float>& model, const Vocab& vocab, const std::vector<TaskInstance>& testset,
                          const std::vector<std::size_t>& bin_edges, MetaKernel kernel = MetaKernel::Compact);

/// Flat CSV: task,train_len,eval_bin,count,token_accuracy,sequence_accuracy.
std::string eval_csv(const std::vector<EvalReport>& reports);

// ---------------------------------------------------------------------------
// Inference benchmark

struct BenchOptions {
    std::size_t runs = 20;
    std::size_t new_tokens = 64;
    MetaKernel kernel = MetaKernel::Dense;
};

struct BenchReport {
    double tokens_per_second = 0;
    double time_to_first_token_ms = 0;
    double slowdown_factor = 1.0;
    std::size_t runs = 0;
};

/// Median decode TPS and TTFT. with_meta = false skips the meta sublayers and
/// strips meta ids from the prompts; the first run is warmup.
BenchReport bench_inference(const Model<float>& model, const std::vector<std::vector<std::size_t>>& prompts,
                            bool with_meta, const BenchOptions& opt = {});

/// Runs both settings and fills slowdown_factor = TPS(no meta) / TPS(meta).
std::pair<BenchReport, BenchReport> bench_compare(const Model<float>& model,
                                                  const std::vector<std::vector<std::size_t>>& prompts,
                                                  const BenchOptions& opt = {});

/// Three-row table: Metric, No meta/pause tokens, With meta/pause tokens.
std::string bench_csv(const BenchReport& without, const BenchReport& with);

}  // namespace metatok
