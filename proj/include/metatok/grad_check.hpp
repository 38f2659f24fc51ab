#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "metatok/autodiff.hpp"

namespace metatok {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

/// Compares backward() gradients with central differences on a random subset
/// of at least min_coords coordinates of every parameter (all of them when the
/// parameter is smaller). rel = |a - n| / max(|a| + |n|, 1e-6).
///
/// The numeric side is the fourth-order five-point stencil. Starting at h, the
/// step shrinks by 4 until the estimate agrees with the one at half the step
/// (a kink of a piecewise-linear op inside the stencil breaks the agreement);
/// the smallest step is used when no pair agrees.
inline GradCheckReport grad_check(const std::function<Var(Tape<double>&)>& f,
                                  const std::vector<Parameter<double>*>& params, double h,
                                  std::uint64_t seed = 0, std::size_t min_coords = 64) {
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape;
        Var loss = f(tape);
        tape.backward(loss);
    }
    auto eval = [&] {
        Tape<double> tape;
        return tape.value(f(tape))[0];
    };
    constexpr int kSteps = 4;
    std::mt19937_64 rng(seed);
    GradCheckReport rep;
    for (auto* p : params) {
        std::vector<std::size_t> idx(p->value.size());
        std::iota(idx.begin(), idx.end(), 0);
        if (idx.size() > min_coords) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(min_coords);
        }
        for (std::size_t i : idx) {
            const double orig = p->value.values[i];
            auto at = [&](double offset) {
                p->value.values[i] = orig + offset;
                return eval();
            };
            auto stencil = [&](double step) {
                return (8 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12 * step);
            };
            double step = h;
            double numeric = stencil(step);
            for (int k = 0; k < kSteps; ++k) {
                const double half = stencil(step / 2);
                if (std::abs(numeric - half) <= 1e-7 * std::abs(half) + 1e-13 / step) break;
                step /= 4;
                numeric = k + 1 < kSteps ? stencil(step) : half;
            }
            p->value.values[i] = orig;
            const double analytic = p->grad[i];
            const double rel =
                std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
            rep.max_rel_error = std::max(rep.max_rel_error, rel);
            ++rep.coords_checked;
        }
    }
    return rep;
}

}  // namespace metatok
