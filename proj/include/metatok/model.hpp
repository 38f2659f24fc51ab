#pragma once

// Decoder-only transformer with meta-token injection.
//
// Block layout (pre-norm, residual around each sublayer):
//   x += CausalAttn(LN(x)); x += MetaAttn(LN(x)); x += MLP(LN(x))
// followed by a final LN and the output projection tied to the token
// embedding. The meta sublayer is absent when meta_attention is off.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metatok/attention.hpp"
#include "metatok/autodiff.hpp"
#include "metatok/position.hpp"

namespace metatok {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_model = 128;
    std::size_t block_size = 256;
    std::size_t vocab_size = 0;
    PEConfig pe;
    double meta_fraction = 0.1;
    double dropout = 0.0;
    std::uint64_t seed = 1337;
    bool meta_attention = true;
    // position t whose target is meta learns the next non-meta token instead of being skipped
    bool retarget_loss = false;
    std::size_t meta_id = 1;
    std::size_t newline_id = 2;
    double ln_eps = 1e-5;

    void validate() const;
    /// Longest sequence forward() accepts.
    std::size_t max_context() const;
    bool operator==(const ModelConfig& o) const;
};

/// V·d + [APE] block·d + L·(attn + meta + mlp + norms) + final norm + output bias.
std::size_t analytic_parameter_count(const ModelConfig& cfg);

struct InjectResult {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> meta_positions;
};

/// Inserts floor(k·n) meta ids at slots drawn uniformly without replacement
/// from the n + M positions of the augmented sequence, then truncates to max_len.
InjectResult inject_meta(std::span<const std::size_t> ids, double k, std::size_t meta_id,
                         std::mt19937_64& rng,
                         std::size_t max_len = std::numeric_limits<std::size_t>::max());

std::vector<std::size_t> meta_positions_of(std::span<const std::size_t> ids, std::size_t meta_id);

/// Next-token targets with meta exclusion. mask[t] is false at the final
/// position and wherever the target is a meta position.
struct LmTargets {
    std::vector<std::size_t> targets;
    std::vector<std::uint8_t> mask;
};
LmTargets lm_targets(std::span<const std::size_t> ids, std::span<const std::size_t> meta_positions,
                     bool retarget = false);

struct Sequence {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> meta_positions;
};

struct ForwardOptions {
    MetaKernel kernel = MetaKernel::Compact;
    bool training = false;                 // enables dropout
    std::mt19937_64* rng = nullptr;        // dropout and positional noise; seeded from cfg.seed when null
    AttentionTrace* trace = nullptr;       // single-sequence batches only
    // rows (in packed order) that need logits; empty = every row
    std::vector<std::size_t> logit_rows;
};

template <typename T>
class Model {
  public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }

    /// Logits [rows × V] for a packed batch; each sequence attends only to itself.
    Var forward(Tape<T>& tape, std::span<const Sequence> batch, const ForwardOptions& opt = {});

    /// Single-sequence convenience wrapper.
    Var forward(Tape<T>& tape, std::span<const std::size_t> ids, std::span<const std::size_t> meta_positions,
                const ForwardOptions& opt = {});

    /// Parameter-by-parameter copy from a model in another precision.
    template <typename U>
    void copy_from(const Model<U>& other) {
        if (!(other.config() == cfg_)) throw std::invalid_argument("copy_from: config mismatch");
        for (std::size_t i = 0; i < store_.size(); ++i) {
            const auto& src = other.params()[i];
            auto& dst = store_[i];
            for (std::size_t j = 0; j < dst.value.size(); ++j) dst.value.values[j] = static_cast<T>(src.value.values[j]);
        }
    }

    struct LayerParams {
        Parameter<T>* attn_ln_g;
        Parameter<T>* attn_ln_b;
        AttentionWeights<T> attn;
        Parameter<T>* meta_ln_g = nullptr;
        Parameter<T>* meta_ln_b = nullptr;
        AttentionWeights<T> meta;
        Parameter<T>* mlp_ln_g;
        Parameter<T>* mlp_ln_b;
        Parameter<T>* w1;
        Parameter<T>* b1;
        Parameter<T>* w2;
        Parameter<T>* b2;
    };
    const LayerParams& layer(std::size_t i) const { return layers_[i]; }
    const Parameter<T>& tok_emb() const { return *tok_emb_; }
    const Parameter<T>* pos_emb() const { return pos_emb_; }
    const Parameter<T>& lnf_g() const { return *lnf_g_; }
    const Parameter<T>& lnf_b() const { return *lnf_b_; }
    const Parameter<T>& lm_bias() const { return *lm_bias_; }

  private:
    ModelConfig cfg_;
    ParameterStore<T> store_;
    std::vector<LayerParams> layers_;
    Parameter<T>* tok_emb_ = nullptr;
    Parameter<T>* pos_emb_ = nullptr;
    Parameter<T>* lnf_g_ = nullptr;
    Parameter<T>* lnf_b_ = nullptr;
    Parameter<T>* lm_bias_ = nullptr;
};

/// Masked next-token loss for one sequence; logits must cover every row.
template <typename T>
Var lm_loss(Tape<T>& tape, Var logits, std::span<const std::size_t> ids,
            std::span<const std::size_t> meta_positions, bool retarget = false) {
    const auto t = lm_targets(ids, meta_positions, retarget);
    return ops::cross_entropy_masked(tape, logits, t.targets, t.mask);
}

/// Incremental decoder with per-layer key/value caches.
///
/// feed() appends tokens and returns the logits of the last one. Tokens equal
/// to cfg.meta_id are meta positions. The Dense kernel scores every cached key
/// through the full mask row; Compact keeps a cache of meta keys only.
template <typename T>
class InferenceSession {
  public:
    /// use_meta = false skips the meta sublayers (timing baseline only).
    InferenceSession(const Model<T>& model, MetaKernel kernel = MetaKernel::Compact,
                     std::uint64_t noise_seed = 0, bool use_meta = true);

    std::vector<T> feed(std::span<const std::size_t> ids, std::vector<T>* all_logits = nullptr);
    std::size_t length() const { return len_; }

  private:
    struct LayerCache {
        std::vector<T> k, v;            // [len × d] after rotary
        std::vector<T> mk, mv;          // meta layer keys/values
        std::vector<std::size_t> mpos;  // positions held in mk/mv
    };
    void positional_rows(std::size_t p0, std::size_t n, std::span<const std::uint8_t> is_meta,
                         std::vector<double>& angles, std::vector<T>& ape);

    const Model<T>& model_;
    MetaKernel kernel_;
    bool use_meta_;
    std::size_t len_ = 0;
    std::vector<LayerCache> cache_;
    std::vector<std::uint8_t> is_meta_;
    std::vector<double> freqs_;
    double logit_mult_ = 1.0;
    std::mt19937_64 noise_rng_;
    std::normal_distribution<double> noise_;
};

/// Greedy continuation. Stops after max_new tokens or when newline is emitted
/// (the newline is not returned). Emitted meta ids stay in the stream.
template <typename T>
std::vector<std::size_t> generate(const Model<T>& model, std::span<const std::size_t> prompt,
                                  std::size_t max_new, MetaKernel kernel = MetaKernel::Compact,
                                  std::uint64_t noise_seed = 0);

struct Checkpoint {
    ModelConfig config;
    std::size_t step = 0;
};

struct OptimizerState {
    std::size_t step = 0;
    std::vector<std::vector<float>> m, v;  // one per parameter, store order
};

/// Directory: manifest.txt plus one little-endian raw file per parameter.
template <typename T>
void save_checkpoint(const Model<T>& model, std::size_t step, const std::filesystem::path& dir,
                     const OptimizerState* opt = nullptr);

ModelConfig read_checkpoint_config(const std::filesystem::path& dir, std::size_t* step = nullptr);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& dir, std::size_t* step = nullptr,
                         OptimizerState* opt = nullptr);

/// Manifest key/value rendering of a config (shared with the run-config echo).
std::vector<std::pair<std::string, std::string>> config_fields(const ModelConfig& cfg);
ModelConfig config_from_fields(const std::vector<std::pair<std::string, std::string>>& fields);

}  // namespace metatok
