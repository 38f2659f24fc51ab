#include "metatok/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "metatok/probes.hpp"

namespace metatok {

std::string to_string(AblationMode m) {
    switch (m) {
        case AblationMode::Full: return "full";
        case AblationMode::NoPos: return "no-pos";
        case AblationMode::NoEmbed: return "no-embed";
        case AblationMode::Neither: return "neither";
    }
    return "?";
}

AblationMode ablation_from_string(const std::string& s) {
    for (auto m : kAllAblations)
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown ablation mode '" + s + "' (expected full, no-pos, no-embed or neither)");
}

std::string ablation_header(AblationMode m) {
    switch (m) {
        case AblationMode::Full: return "Full";
        case AblationMode::NoPos: return "No Pos";
        case AblationMode::NoEmbed: return "No Embed";
        case AblationMode::Neither: return "Neither";
    }
    return "?";
}

ModelConfig ablated(const ModelConfig& cfg, AblationMode m) {
    ModelConfig c = cfg;
    c.pe.zero_at_meta = m == AblationMode::NoPos || m == AblationMode::Neither;
    c.pe.zero_embed_at_meta = m == AblationMode::NoEmbed || m == AblationMode::Neither;
    return c;
}

template <typename T>
std::vector<double> positional_rows(const Model<T>& model, std::size_t seq_len,
                                    std::span<const std::size_t> meta_positions, std::uint64_t noise_seed) {
    const auto& cfg = model.config();
    std::mt19937_64 rng(noise_seed);
    if (cfg.pe.mode == PEMode::APE) {
        const auto& table = model.pos_emb()->value;
        const std::size_t d = cfg.d_model;
        if (seq_len > table.rows()) throw std::out_of_range("position out of range");
        std::vector<double> rows(seq_len * d);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<double>(table.values[i]);
        apply_ablations(rows, d, meta_positions, cfg.pe, &rng);
        return rows;
    }
    if (cfg.pe.mode == PEMode::ROPE)
        return rope_angle_table(seq_len, cfg.d_model / cfg.n_heads, cfg.pe, meta_positions, &rng);
    return {};
}

template std::vector<double> positional_rows(const Model<float>&, std::size_t, std::span<const std::size_t>,
                                             std::uint64_t);
template std::vector<double> positional_rows(const Model<double>&, std::size_t, std::span<const std::size_t>,
                                             std::uint64_t);

namespace {

std::string model_label(const ModelConfig& c) {
    std::string pe = c.pe.mode == PEMode::APE ? "APE" : c.pe.mode == PEMode::ROPE ? "RoPE" : "NoPE";
    return std::string(c.meta_attention ? "Meta" : "Base") + " + " + pe;
}

std::pair<double, double> weighted(const EvalReport& r) {
    double tok = 0, seq = 0;
    std::size_t n = 0;
    for (const auto& b : r.bins) {
        tok += b.token_accuracy * static_cast<double>(b.count);
        seq += b.sequence_accuracy * static_cast<double>(b.count);
        n += b.count;
    }
    if (n == 0) return {0.0, 0.0};
    return {tok / static_cast<double>(n), seq / static_cast<double>(n)};
}

}  // namespace

AblationResult run_ablation(const Model<float>& model, const Vocab& vocab, const std::vector<TaskInstance>& testset,
                            const std::vector<std::size_t>& bins, const std::vector<AblationMode>& modes) {
    if (modes.empty()) throw std::invalid_argument("ablation: no modes requested");
    AblationResult r;
    r.label = model_label(model.config());
    r.modes = modes;
    for (auto m : modes) {
        auto variant = clone_with(model, ablated(model.config(), m));
        r.reports.push_back(evaluate_model(*variant, vocab, testset, bins));
    }
    return r;
}

std::string ablation_csv(const AblationResult& r) {
    std::ostringstream o;
    o.setf(std::ios::fixed);
    o.precision(1);
    o << "Model (Eval Len)";
    for (auto m : r.modes) o << ',' << ablation_header(m);
    o << '\n';
    const auto& bins = r.reports.front().bins;
    for (std::size_t b = 0; b < bins.size(); ++b) {
        if (bins[b].count == 0) continue;
        o << r.label << " (" << bins[b].hi << ')';
        for (const auto& rep : r.reports) o << ',' << rep.bins[b].token_accuracy;
        o << '\n';
    }
    return o.str();
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(rx.size());
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(ry.size());
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

NoiseSweep noise_sweep(const Model<float>& model, const Vocab& vocab, const std::vector<TaskInstance>& testset,
                       const std::vector<std::size_t>& bins, const std::vector<double>& sigmas) {
    if (sigmas.empty()) throw std::invalid_argument("noise sweep: empty σ grid");
    NoiseSweep s;
    for (double sigma : sigmas) {
        if (!(sigma >= 0)) throw std::invalid_argument("noise sweep: σ must be non-negative");
        ModelConfig c = model.config();
        c.pe.noise_sigma = sigma;
        auto variant = clone_with(model, c);
        NoisePoint p;
        p.sigma = sigma;
        p.report = evaluate_model(*variant, vocab, testset, bins);
        std::tie(p.token_accuracy, p.sequence_accuracy) = weighted(p.report);
        s.points.push_back(std::move(p));
    }
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < s.points.size(); ++i) {
        xs.push_back(s.points[i].sigma);
        ys.push_back(s.points[i].token_accuracy);
        if (i > 0 && s.points[i].token_accuracy > s.points[i - 1].token_accuracy) ++s.rises;
    }
    s.monotone_nonincreasing = s.rises == 0;
    s.spearman = xs.size() >= 2 ? spearman(xs, ys) : 0.0;
    s.drop = ys.front() - ys.back();
    return s;
}

std::string noise_csv(const NoiseSweep& s) {
    std::ostringstream o;
    o.setf(std::ios::fixed);
    o.precision(2);
    o << "sigma,token_accuracy,sequence_accuracy,count\n";
    for (const auto& p : s.points) {
        std::size_t n = 0;
        for (const auto& b : p.report.bins) n += b.count;
        o << p.sigma << ',' << p.token_accuracy << ',' << p.sequence_accuracy << ',' << n << '\n';
    }
    return o.str();
}

}  // namespace metatok
