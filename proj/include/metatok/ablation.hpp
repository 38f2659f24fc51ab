#pragma once

// Zeroing ablations at meta positions and the Gaussian positional-noise sweep.

#include <string>
#include <vector>

#include "metatok/model.hpp"
#include "metatok/train.hpp"

namespace metatok {

enum class AblationMode { Full, NoPos, NoEmbed, Neither };
inline constexpr AblationMode kAllAblations[] = {AblationMode::Full, AblationMode::NoPos, AblationMode::NoEmbed,
                                                 AblationMode::Neither};

/// full | no-pos | no-embed | neither
std::string to_string(AblationMode m);
AblationMode ablation_from_string(const std::string& s);
/// Column header: Full, No Pos, No Embed, Neither.
std::string ablation_header(AblationMode m);

/// Config with the positional pathway and/or token embedding zeroed at meta positions.
ModelConfig ablated(const ModelConfig& cfg, AblationMode m);

/// Positional contribution for a sequence: APE rows [T×d], rotary angles
/// [T×dk/2] under RoPE, empty under NoPE. Noise draws come from a fixed seed.
template <typename T>
std::vector<double> positional_rows(const Model<T>& model, std::size_t seq_len,
                                    std::span<const std::size_t> meta_positions, std::uint64_t noise_seed = 0);

struct AblationResult {
    std::string label;  // e.g. "Meta + RoPE"
    std::vector<AblationMode> modes;
    std::vector<EvalReport> reports;  // one per mode
};

AblationResult run_ablation(const Model<float>& model, const Vocab& vocab, const std::vector<TaskInstance>& testset,
                            const std::vector<std::size_t>& bins, const std::vector<AblationMode>& modes);

/// One row per non-empty bin: Model (Eval Len),Full,No Pos,... with token accuracy in percent.
std::string ablation_csv(const AblationResult& r);

struct NoisePoint {
    double sigma = 0;
    EvalReport report;
    double token_accuracy = 0;     // count-weighted over bins
    double sequence_accuracy = 0;
};

struct NoiseSweep {
    std::vector<NoisePoint> points;
    bool monotone_nonincreasing = false;  // token accuracy never rises with σ
    std::size_t rises = 0;                // adjacent σ pairs where accuracy rose
    double spearman = 0;                  // rank correlation of σ and token accuracy
    double drop = 0;                      // accuracy at the smallest σ minus at the largest
};

NoiseSweep noise_sweep(const Model<float>& model, const Vocab& vocab, const std::vector<TaskInstance>& testset,
                       const std::vector<std::size_t>& bins, const std::vector<double>& sigmas);

std::string noise_csv(const NoiseSweep& s);

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace metatok
