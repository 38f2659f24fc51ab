#pragma once

// Positional pathways: learned absolute rows, rotary angles with optional
// YaRN frequency rescaling, and the ablation hooks used at meta positions.

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metatok/tensor.hpp"

namespace metatok {

enum class PEMode { APE, ROPE, NOPE };

std::string to_string(PEMode m);
PEMode pe_mode_from_string(const std::string& s);

struct YarnParams {
    double scale = 1.0;
    std::size_t original_max_seq_len = 1024;
    double extrapolation_factor = 1.0;
    double attn_factor = 1.0;
    double beta_fast = 32.0;
    double beta_slow = 1.0;

    void validate() const;
};

/// The 4096-token configuration (scale 4) and the 8192-token one (scale 8).
YarnParams yarn_preset(double scale);

struct PEConfig {
    PEMode mode = PEMode::ROPE;
    double rope_base = 10000.0;
    std::optional<YarnParams> yarn;
    double noise_sigma = 0.0;
    bool zero_at_meta = false;
    bool zero_embed_at_meta = false;

    void validate() const;
};

inline constexpr double kNoiseGrid[] = {0.0, 0.1, 0.5, 1.0, 2.0};

/// Unscaled rotary frequencies base^(-2i/d), i < d/2.
std::vector<double> rope_frequencies(std::size_t dim, double base);

struct YarnAdjustment {
    std::vector<double> factors;  // multiplies each frequency (and so every angle in that slot)
    double logit_multiplier = 1.0;
};

/// NTK-by-parts rescaling. For frequency f with wavelength 2π/f the ramp
/// γ = clamp((L/λ - beta_slow) / (beta_fast - beta_slow), 0, 1) picks between
/// the interpolated f/scale (γ = 0) and the original f (γ = 1); the ramp is
/// scaled by extrapolation_factor. The logit multiplier is mscale², with
/// mscale = (0.1·ln(scale) + 1)·attn_factor, matching cos/sin both scaled by mscale.
YarnAdjustment yarn_adjust(std::span<const double> freqs, const YarnParams& params);

/// Applies yarn_adjust to an angle table laid out [T × freqs.size()].
std::vector<double> yarn_adjust_angles(std::span<const double> angles, std::span<const double> freqs,
                                       const YarnParams& params, double* logit_multiplier = nullptr);

/// Effective per-slot frequencies after YaRN (identity when cfg.yarn is empty).
std::vector<double> effective_frequencies(std::size_t dim, const PEConfig& cfg,
                                          double* logit_multiplier = nullptr);

/// Rotates slices (2i, 2i+1) of x by t·f_i.
std::vector<double> rope_apply(std::span<const double> x, double t, const PEConfig& cfg);

/// Row t of the learned table.
template <typename T>
std::vector<T> ape_embed(std::size_t t, const Tensor<T>& table) {
    if (t >= table.rows()) throw std::out_of_range("position out of range");
    const std::size_t d = table.cols();
    return std::vector<T>(table.data() + t * d, table.data() + (t + 1) * d);
}

/// Gaussian noise on every row then exact zeros at meta rows. rows is [T × width].
/// Noise draws consume the rng identically whether or not zeroing is enabled.
void apply_ablations(std::vector<double>& rows, std::size_t width,
                     std::span<const std::size_t> meta_positions, const PEConfig& cfg,
                     std::mt19937_64* rng);

/// Rotation angles [T × dim/2] for positions 0..T-1 after YaRN and ablations.
/// Zeroing at meta rows yields identity rotation there.
std::vector<double> rope_angle_table(std::size_t seq_len, std::size_t dim, const PEConfig& cfg,
                                     std::span<const std::size_t> meta_positions,
                                     std::mt19937_64* rng, double* logit_multiplier = nullptr);

}  // namespace metatok
