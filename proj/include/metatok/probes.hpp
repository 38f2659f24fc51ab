#pragma once

// Analysis instruments over a frozen model: attention sharpening by meta
// content, numeric entropy checks, hidden-state caching maps, residual dumps,
// a variational information-bottleneck probe and bias expressivity fits.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metatok/model.hpp"
#include "metatok/tasks.hpp"
#include "metatok/vocab.hpp"

namespace metatok {

/// Fresh model with cfg (same parameter layout) holding a copy of m's values.
template <typename T>
std::unique_ptr<Model<T>> clone_with(const Model<T>& m, const ModelConfig& cfg);

/// Forward of a single sequence with a full trace.
template <typename T>
AttentionTrace trace_forward(const Model<T>& m, std::span<const std::size_t> ids,
                             std::span<const std::size_t> meta_positions);

// ---------------------------------------------------------------------------
// Logit boost of meta content

struct BoostRow {
    std::size_t sequence = 0;
    std::size_t query = 0;
    std::size_t key = 0;          // most recent meta position at or before the query
    double delta = 0;             // logit(intact) - logit(meta embedding zeroed), mean over heads
    double entropy_drop = 0;      // H(zeroed) - H(intact), mean over heads
};

struct LogitBoostReport {
    std::size_t layer = 0;        // final layer's causal attention
    std::vector<BoostRow> rows;
    double mean_delta = 0;
    double mean_entropy_drop = 0;
    double fraction_sharpened = 0;  // rows with entropy_drop > 0
};

/// Two forwards per sequence, intact and with zero token embedding at meta
/// positions. Throws std::invalid_argument when no sequence has a meta position.
template <typename T>
LogitBoostReport measure_boost(const Model<T>& model, std::span<const Sequence> batch);

// ---------------------------------------------------------------------------
// Entropy sharpening

std::vector<double> softmax(std::span<const double> logits);
double entropy_of_logits(std::span<const double> logits);

/// -p log p - (1-p) log(1-p) + (1-p) log(N-1) with p = 1/(1 + (N-1)e^{-Δ}).
double entropy_bound(std::size_t n, double delta);

struct Theorem41Report {
    std::size_t n = 0;
    std::size_t trials = 0;
    std::size_t strict_violations = 0;    // boosted entropy not below the unboosted one
    std::size_t monotone_violations = 0;  // entropy rising along the Δ grid
    std::size_t bound_checked = 0;        // instances satisfying the margin condition
    std::size_t bound_violations = 0;
    double max_entropy_violation = 0;     // largest entropy increase seen (0 when none)
    double max_bound_excess = 0;          // largest H - bound seen (negative when the bound is slack)
    bool passed() const { return strict_violations == 0 && monotone_violations == 0 && bound_violations == 0; }
};

/// Random logit vectors; the argmax logit is boosted by each Δ in the grid.
Theorem41Report theorem41_numeric(std::size_t n, std::span<const double> delta_grid, std::size_t trials,
                                  std::mt19937_64& rng);

struct CovIdentityReport {
    double max_deviation = 0;         // |analytic - central difference| over the t grid
    double max_derivative = 0;        // largest dH/dt seen
};

/// dH/dt at logits + t·e_index equals -Cov_α(e_index, ln α); compared with a
/// central difference of step h at t in [0, t_max].
CovIdentityReport cov_identity_check(std::span<const double> logits, std::size_t index, double h = 1e-5,
                                     double t_max = 5.0, std::size_t t_steps = 11);

// ---------------------------------------------------------------------------
// Caching similarity and residual dumps

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct SimilarityMap {
    std::size_t seq_len = 0;
    std::vector<std::size_t> meta_positions;
    std::vector<std::vector<double>> rows;  // rows[m][j] for j < meta_positions[m]
};

/// Final-layer hidden state at each meta position against every earlier position.
template <typename T>
SimilarityMap caching_similarity(const Model<T>& model, std::span<const std::size_t> ids,
                                 std::span<const std::size_t> meta_positions);

struct SimilarityProfile {
    double near = 0;  // mean similarity to the `near` positions right before a meta token
    double far = 0;   // mean similarity to positions more than `far` back
    std::size_t near_count = 0, far_count = 0;
};
SimilarityProfile similarity_profile(const SimilarityMap& map, std::size_t near = 8, std::size_t far = 32);

/// similarity.bin holds M×T float64 values (NaN where j >= position) plus manifest.txt.
void write_similarity(const SimilarityMap& map, const std::filesystem::path& dir);

struct ResidualDump {
    std::size_t seq_len = 0;
    std::size_t d_model = 0;
    std::vector<std::size_t> meta_positions;
    std::vector<std::vector<float>> layers;  // post-embedding then one per block, [T×d]
    std::vector<double> mean_norms;          // mean row L2 norm per snapshot
};

template <typename T>
ResidualDump residual_dump(const Model<T>& model, std::span<const std::size_t> ids,
                           std::span<const std::size_t> meta_positions, const std::filesystem::path& dir);
ResidualDump read_residual_dump(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Information bottleneck probe

struct RDPoint {
    double beta = 0;
    double rate = 0;        // nats, mean KL to the standard normal prior
    double distortion = 0;  // nats, mean cross-entropy
};

inline constexpr double kBetaGrid[] = {0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0};

struct VibExample {
    std::vector<double> h;
    std::size_t label = 0;
};

struct VibOptions {
    std::size_t latent = 16;
    std::size_t hidden = 32;
    std::size_t epochs = 10;
    std::size_t eval_samples = 16;
    double lr = 1e-3;
    std::uint64_t seed = 7;
};

/// Encoder q(z|h) = Normal(μ(h), diag σ²(h)) with a two-layer perceptron for
/// each of μ and log σ², decoder softmax(Wz + b). Batch size 1, inputs
/// standardised per feature. Throws NumericError on a non-finite objective.
RDPoint vib_fit(const std::vector<VibExample>& data, std::size_t n_classes, double beta, const VibOptions& opt = {});

struct ProbeSet {
    std::vector<VibExample> meta;   // final-layer hidden at the last meta position
    std::vector<VibExample> plain;  // and at the last non-meta position
    std::vector<std::string> classes;
};

/// Label is the first answer token; classes are the distinct answer tokens.
template <typename T>
ProbeSet make_probe_set(const Model<T>& model, const Vocab& vocab, const std::vector<TaskInstance>& data);

struct RDSweep {
    std::vector<RDPoint> meta, plain;
    std::size_t dominance_violations = 0;
    bool meta_rate_monotone = false;
    bool plain_rate_monotone = false;
    bool dominates() const { return dominance_violations <= 1; }
};

/// Rate non-increasing in β: r[k+1] <= (1 + rel_tol)·r[k] + abs_tol.
bool rate_nonincreasing(std::span<const RDPoint> curve, double rel_tol = 0.05, double abs_tol = 1e-3);

/// Points of `a` whose distortion exceeds `b`'s at the same rate, with b
/// linearly interpolated in rate (clamped at its ends).
std::size_t dominance_violations(std::span<const RDPoint> a, std::span<const RDPoint> b, double tol = 1e-9);

RDSweep rd_sweep(const ProbeSet& set, std::span<const double> betas, const VibOptions& opt = {});

std::string rd_csv(const RDSweep& s);

// ---------------------------------------------------------------------------
// Bias expressivity

struct BiasFitReport {
    double residual_abs = 0;   // best fit by a column function p(j)
    double residual_rel = 0;   // best fit by an offset function b(i-j)
    double residual_meta = 0;  // best fit by a content-dependent boost u(C_j)
    bool inconclusive = false; // contexts do not separate the classes
};

/// Least-squares fits of target[c][i·T + j] over causal entries j <= i. Residuals
/// are L2 norms of the fit error.
BiasFitReport bias_fit(std::size_t t, const std::vector<std::vector<std::size_t>>& contexts,
                       const std::vector<std::vector<double>>& targets);

/// B*_{ij} = f(C_j) for the given token values f.
std::vector<double> content_bias(std::size_t t, std::span<const std::size_t> context, std::span<const double> f);

/// Two contexts of length t over a small alphabet that differ in at least one
/// slot, with distinct token values.
BiasFitReport bias_expressivity(std::size_t t, std::size_t n_contexts, std::mt19937_64& rng);

}  // namespace metatok
