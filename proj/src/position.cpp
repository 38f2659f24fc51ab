#include "metatok/position.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace metatok {

std::string to_string(PEMode m) {
    switch (m) {
        case PEMode::APE: return "ape";
        case PEMode::ROPE: return "rope";
        case PEMode::NOPE: return "nope";
    }
    return "?";
}

PEMode pe_mode_from_string(const std::string& s) {
    if (s == "ape") return PEMode::APE;
    if (s == "rope") return PEMode::ROPE;
    if (s == "nope") return PEMode::NOPE;
    throw std::invalid_argument("unknown positional mode: " + s);
}

void YarnParams::validate() const {
    if (!(scale >= 1.0)) throw std::invalid_argument("yarn: scale must be >= 1");
    if (original_max_seq_len < 1) throw std::invalid_argument("yarn: original_max_seq_len must be >= 1");
    if (!(beta_fast > beta_slow)) throw std::invalid_argument("yarn: beta_fast must exceed beta_slow");
}

YarnParams yarn_preset(double scale) {
    YarnParams p;
    p.scale = scale;
    p.original_max_seq_len = 1024;
    p.extrapolation_factor = 1.0;
    p.attn_factor = 1.0;
    p.beta_fast = 32.0;
    p.beta_slow = 1.0;
    return p;
}

void PEConfig::validate() const {
    if (yarn && mode != PEMode::ROPE) throw std::invalid_argument("pe: yarn requires rope mode");
    if (yarn) yarn->validate();
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("pe: noise_sigma must be >= 0");
    if (!(rope_base > 0.0)) throw std::invalid_argument("pe: rope_base must be positive");
}

std::vector<double> rope_frequencies(std::size_t dim, double base) {
    if (dim % 2 != 0) throw std::invalid_argument("rope: dimension must be even");
    std::vector<double> f(dim / 2);
    for (std::size_t i = 0; i < f.size(); ++i)
        f[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    return f;
}

YarnAdjustment yarn_adjust(std::span<const double> freqs, const YarnParams& params) {
    params.validate();
    YarnAdjustment out;
    out.factors.resize(freqs.size());
    const double s = params.scale;
    const double L = static_cast<double>(params.original_max_seq_len);
    for (std::size_t i = 0; i < freqs.size(); ++i) {
        const double wavelength = 2.0 * std::numbers::pi / freqs[i];
        const double r = L / wavelength;
        const double ramp =
            std::clamp((r - params.beta_slow) / (params.beta_fast - params.beta_slow), 0.0, 1.0);
        const double keep = ramp * params.extrapolation_factor;
        out.factors[i] = (1.0 - keep) / s + keep;
    }
    const double mscale = (s <= 1.0 ? 1.0 : 0.1 * std::log(s) + 1.0) * params.attn_factor;
    out.logit_multiplier = mscale * mscale;
    return out;
}

std::vector<double> yarn_adjust_angles(std::span<const double> angles, std::span<const double> freqs,
                                       const YarnParams& params, double* logit_multiplier) {
    if (freqs.empty() || angles.size() % freqs.size() != 0)
        throw std::invalid_argument("yarn: angle table is not [T x slots]");
    const auto adj = yarn_adjust(freqs, params);
    std::vector<double> out(angles.begin(), angles.end());
    const std::size_t w = freqs.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= adj.factors[i % w];
    if (logit_multiplier) *logit_multiplier = adj.logit_multiplier;
    return out;
}

std::vector<double> effective_frequencies(std::size_t dim, const PEConfig& cfg,
                                          double* logit_multiplier) {
    auto f = rope_frequencies(dim, cfg.rope_base);
    double mult = 1.0;
    if (cfg.yarn) {
        const auto adj = yarn_adjust(f, *cfg.yarn);
        for (std::size_t i = 0; i < f.size(); ++i) f[i] *= adj.factors[i];
        mult = adj.logit_multiplier;
    }
    if (logit_multiplier) *logit_multiplier = mult;
    return f;
}

std::vector<double> rope_apply(std::span<const double> x, double t, const PEConfig& cfg) {
    if (x.size() % 2 != 0) throw std::invalid_argument("rope: dimension must be even");
    const auto f = effective_frequencies(x.size(), cfg);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double a = t * f[i];
        const double c = std::cos(a), s = std::sin(a);
        y[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        y[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    return y;
}

void apply_ablations(std::vector<double>& rows, std::size_t width,
                     std::span<const std::size_t> meta_positions, const PEConfig& cfg,
                     std::mt19937_64* rng) {
    if (width == 0 || rows.size() % width != 0) throw std::invalid_argument("ablation: bad row width");
    if (cfg.noise_sigma > 0.0) {
        if (!rng) throw std::invalid_argument("ablation: noise requires an rng");
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        for (double& v : rows) v += noise(*rng);
    }
    if (cfg.zero_at_meta) {
        const std::size_t n = rows.size() / width;
        for (std::size_t p : meta_positions) {
            if (p >= n) throw std::out_of_range("ablation: meta position out of range");
            std::fill_n(rows.begin() + static_cast<std::ptrdiff_t>(p * width), width, 0.0);
        }
    }
}

std::vector<double> rope_angle_table(std::size_t seq_len, std::size_t dim, const PEConfig& cfg,
                                     std::span<const std::size_t> meta_positions,
                                     std::mt19937_64* rng, double* logit_multiplier) {
    const auto f = effective_frequencies(dim, cfg, logit_multiplier);
    const std::size_t half = f.size();
    std::vector<double> angles(seq_len * half);
    for (std::size_t t = 0; t < seq_len; ++t)
        for (std::size_t i = 0; i < half; ++i) angles[t * half + i] = static_cast<double>(t) * f[i];
    apply_ablations(angles, half, meta_positions, cfg, rng);
    return angles;
}

}  // namespace metatok
