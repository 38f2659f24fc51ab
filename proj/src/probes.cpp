#include "metatok/probes.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace metatok {

template <typename T>
std::unique_ptr<Model<T>> clone_with(const Model<T>& m, const ModelConfig& cfg) {
    auto out = std::make_unique<Model<T>>(cfg);
    const auto& src = m.params();
    auto& dst = out->params();
    if (src.size() != dst.size()) throw ShapeError("clone_with: parameter layouts differ");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].value.shape != dst[i].value.shape || src[i].name != dst[i].name)
            throw ShapeError("clone_with: parameter " + src[i].name + " differs");
        dst[i].value.values = src[i].value.values;
    }
    return out;
}

template <typename T>
AttentionTrace trace_forward(const Model<T>& m, std::span<const std::size_t> ids,
                             std::span<const std::size_t> meta_positions) {
    auto copy = clone_with(m, m.config());
    AttentionTrace tr;
    Tape<T> tape;
    ForwardOptions opt;
    opt.trace = &tr;
    opt.logit_rows = {ids.size() - 1};
    copy->forward(tape, ids, meta_positions, opt);
    return tr;
}

// ---------------------------------------------------------------------------

template <typename T>
LogitBoostReport measure_boost(const Model<T>& model, std::span<const Sequence> batch) {
    ModelConfig zc = model.config();
    zc.pe.zero_embed_at_meta = true;
    ModelConfig ic = model.config();
    ic.pe.zero_embed_at_meta = false;
    auto intact = clone_with(model, ic);
    auto zeroed = clone_with(model, zc);

    LogitBoostReport rep;
    rep.layer = model.config().n_layers - 1;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch[s];
        if (seq.meta_positions.empty()) continue;
        const auto a = trace_forward(*intact, seq.ids, seq.meta_positions);
        const auto b = trace_forward(*zeroed, seq.ids, seq.meta_positions);
        const std::size_t n = a.seq_len;
        const auto& ha = a.causal[rep.layer];
        const auto& hb = b.causal[rep.layer];
        std::vector<std::uint8_t> is_meta(n, 0);
        for (auto p : seq.meta_positions) is_meta[p] = 1;
        std::size_t key = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (is_meta[i]) key = i;
            if (key == n) continue;
            BoostRow r{s, i, key, 0, 0};
            for (std::size_t h = 0; h < ha.size(); ++h) {
                r.delta += ha[h].logits[i * n + key] - hb[h].logits[i * n + key];
                r.entropy_drop += hb[h].entropy[i] - ha[h].entropy[i];
            }
            r.delta /= static_cast<double>(ha.size());
            r.entropy_drop /= static_cast<double>(ha.size());
            rep.rows.push_back(r);
        }
    }
    if (rep.rows.empty()) throw std::invalid_argument("measure_boost: no meta positions in the batch");
    std::size_t sharp = 0;
    for (const auto& r : rep.rows) {
        rep.mean_delta += r.delta;
        rep.mean_entropy_drop += r.entropy_drop;
        sharp += r.entropy_drop > 0;
    }
    const auto cnt = static_cast<double>(rep.rows.size());
    rep.mean_delta /= cnt;
    rep.mean_entropy_drop /= cnt;
    rep.fraction_sharpened = static_cast<double>(sharp) / cnt;
    return rep;
}

// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
    for (auto& v : p) v /= z;
    return p;
}

double entropy_of_logits(std::span<const double> logits) {
    // H = log Z - Σ p·ℓ in shifted form, stable for large margins
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0, zl = 0;
    for (double l : logits) {
        const double e = std::exp(l - mx);
        z += e;
        zl += e * (l - mx);
    }
    return std::log(z) - zl / z;
}

double entropy_bound(std::size_t n, double delta) {
    if (n < 2) throw std::invalid_argument("entropy_bound: need N >= 2");
    const double p = 1.0 / (1.0 + static_cast<double>(n - 1) * std::exp(-delta));
    const double q = 1.0 - p;
    double h = -p * std::log(p);
    if (q > 0) h += -q * std::log(q) + q * std::log(static_cast<double>(n - 1));
    return h;
}

Theorem41Report theorem41_numeric(std::size_t n, std::span<const double> delta_grid, std::size_t trials,
                                  std::mt19937_64& rng) {
    if (n < 2) throw std::invalid_argument("theorem41_numeric: need N >= 2");
    for (double d : delta_grid)
        if (!(d > 0)) throw std::invalid_argument("theorem41_numeric: Δ values must be positive");
    std::vector<double> grid(delta_grid.begin(), delta_grid.end());
    std::sort(grid.begin(), grid.end());
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> spread(0.1, 4.0);
    Theorem41Report rep;
    rep.n = n;
    rep.trials = trials;
    rep.max_bound_excess = -std::numeric_limits<double>::infinity();
    std::vector<double> l(n);
    for (std::size_t t = 0; t < trials; ++t) {
        const double s = spread(rng);
        for (auto& v : l) v = s * nd(rng);
        const std::size_t k = static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
        const double h0 = entropy_of_logits(l);
        double prev = h0;
        for (double d : grid) {
            auto b = l;
            b[k] += d;
            const double h = entropy_of_logits(b);
            if (!(h < h0)) ++rep.strict_violations;
            if (h > prev + 1e-12) ++rep.monotone_violations;
            rep.max_entropy_violation = std::max({rep.max_entropy_violation, h - h0, h - prev});
            prev = h;
            double second = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j)
                if (j != k) second = std::max(second, b[j]);
            if (second <= b[k] - d) {
                ++rep.bound_checked;
                const double excess = h - entropy_bound(n, d);
                rep.max_bound_excess = std::max(rep.max_bound_excess, excess);
                if (excess > 1e-12) ++rep.bound_violations;
            }
        }
    }
    rep.max_entropy_violation = std::max(0.0, rep.max_entropy_violation);
    return rep;
}

CovIdentityReport cov_identity_check(std::span<const double> logits, std::size_t index, double h, double t_max,
                                     std::size_t t_steps) {
    if (index >= logits.size()) throw std::out_of_range("cov_identity_check: index out of range");
    for (double v : logits)
        if (!std::isfinite(v)) throw std::invalid_argument("cov_identity_check: logits must be finite");
    CovIdentityReport rep;
    rep.max_derivative = -std::numeric_limits<double>::infinity();
    std::vector<double> l(logits.begin(), logits.end());
    auto at = [&](double t) {
        auto b = l;
        b[index] += t;
        return b;
    };
    for (std::size_t s = 0; s < t_steps; ++s) {
        const double t = t_steps > 1 ? t_max * static_cast<double>(s) / static_cast<double>(t_steps - 1) : 0.0;
        const auto b = at(t);
        const auto a = softmax(b);
        // -Cov_α(e_k, ln α) = -(α_k ln α_k - α_k Σ α_j ln α_j)
        double mean_log = 0;
        for (double p : a) mean_log += p > 0 ? p * std::log(p) : 0.0;
        const double analytic = -(a[index] * std::log(a[index]) - a[index] * mean_log);
        const double fd = (entropy_of_logits(at(t + h)) - entropy_of_logits(at(t - h))) / (2 * h);
        rep.max_deviation = std::max(rep.max_deviation, std::abs(analytic - fd));
        rep.max_derivative = std::max(rep.max_derivative, analytic);
    }
    return rep;
}

// ---------------------------------------------------------------------------

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
    if (aa == 0 || bb == 0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

template <typename T>
SimilarityMap caching_similarity(const Model<T>& model, std::span<const std::size_t> ids,
                                 std::span<const std::size_t> meta_positions) {
    if (meta_positions.empty()) throw std::invalid_argument("caching_similarity: no meta positions");
    const auto tr = trace_forward(model, ids, meta_positions);
    const auto& h = tr.residual.back();
    const std::size_t d = tr.d_model;
    SimilarityMap map;
    map.seq_len = tr.seq_len;
    map.meta_positions = tr.meta_positions;
    for (auto p : map.meta_positions) {
        std::vector<double> row(p);
        for (std::size_t j = 0; j < p; ++j)
            row[j] = cosine_similarity(std::span(h).subspan(p * d, d), std::span(h).subspan(j * d, d));
        map.rows.push_back(std::move(row));
    }
    return map;
}

SimilarityProfile similarity_profile(const SimilarityMap& map, std::size_t near, std::size_t far) {
    SimilarityProfile s;
    for (std::size_t m = 0; m < map.rows.size(); ++m) {
        const std::size_t p = map.meta_positions[m];
        for (std::size_t j = 0; j < p; ++j) {
            const std::size_t back = p - j;
            if (back <= near) s.near += map.rows[m][j], ++s.near_count;
            if (back > far) s.far += map.rows[m][j], ++s.far_count;
        }
    }
    if (s.near_count) s.near /= static_cast<double>(s.near_count);
    if (s.far_count) s.far /= static_cast<double>(s.far_count);
    return s;
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    return f;
}

template <typename V>
void write_raw(std::ofstream& f, const std::vector<V>& v) {
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(V)));
}

}  // namespace

void write_similarity(const SimilarityMap& map, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<double> flat(map.rows.size() * map.seq_len, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t m = 0; m < map.rows.size(); ++m)
        std::copy(map.rows[m].begin(), map.rows[m].end(), flat.begin() + static_cast<std::ptrdiff_t>(m * map.seq_len));
    auto bin = open_out(dir / "similarity.bin");
    write_raw(bin, flat);
    auto man = open_out(dir / "manifest.txt");
    man << "metatok-similarity 1\nseq_len " << map.seq_len << "\nrows " << map.rows.size() << "\nmeta";
    for (auto p : map.meta_positions) man << ' ' << p;
    man << "\nfile similarity.bin f64 " << map.rows.size() << 'x' << map.seq_len << '\n';
}

template <typename T>
ResidualDump residual_dump(const Model<T>& model, std::span<const std::size_t> ids,
                           std::span<const std::size_t> meta_positions, const std::filesystem::path& dir) {
    const auto tr = trace_forward(model, ids, meta_positions);
    ResidualDump d;
    d.seq_len = tr.seq_len;
    d.d_model = tr.d_model;
    d.meta_positions = tr.meta_positions;
    for (const auto& snap : tr.residual) {
        d.layers.emplace_back(snap.begin(), snap.end());
        double norm = 0;
        for (std::size_t t = 0; t < d.seq_len; ++t) {
            double sq = 0;
            for (std::size_t j = 0; j < d.d_model; ++j) sq += snap[t * d.d_model + j] * snap[t * d.d_model + j];
            norm += std::sqrt(sq);
        }
        norm /= static_cast<double>(d.seq_len);
        if (!std::isfinite(norm)) throw NumericError("residual_dump: non-finite residual norm");
        d.mean_norms.push_back(norm);
    }
    std::filesystem::create_directories(dir);
    auto man = open_out(dir / "manifest.txt");
    man << "metatok-residuals 1\nseq_len " << d.seq_len << "\nd_model " << d.d_model << "\nsnapshots "
        << d.layers.size() << "\nmeta";
    for (auto p : d.meta_positions) man << ' ' << p;
    man << '\n';
    man.precision(17);
    for (std::size_t i = 0; i < d.layers.size(); ++i) {
        const std::string file = "residual_" + std::to_string(i) + ".bin";
        auto bin = open_out(dir / file);
        write_raw(bin, d.layers[i]);
        man << "snapshot " << i << ' ' << file << ' ' << d.mean_norms[i] << '\n';
    }
    return d;
}

ResidualDump read_residual_dump(const std::filesystem::path& dir) {
    std::ifstream man(dir / "manifest.txt");
    if (!man) throw std::runtime_error("cannot read " + (dir / "manifest.txt").string());
    std::string line;
    std::getline(man, line);
    if (line != "metatok-residuals 1") throw std::runtime_error("residual dump: bad header");
    ResidualDump d;
    std::size_t snaps = 0;
    while (std::getline(man, line)) {
        std::istringstream in(line);
        std::string key;
        in >> key;
        if (key == "seq_len") in >> d.seq_len;
        else if (key == "d_model") in >> d.d_model;
        else if (key == "snapshots") in >> snaps;
        else if (key == "meta") {
            std::size_t p;
            while (in >> p) d.meta_positions.push_back(p);
        } else if (key == "snapshot") {
            std::size_t i;
            std::string file;
            double norm;
            in >> i >> file >> norm;
            std::ifstream bin(dir / file, std::ios::binary);
            std::vector<float> v(d.seq_len * d.d_model);
            bin.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
            if (!bin) throw std::runtime_error("residual dump: short file " + file);
            d.layers.push_back(std::move(v));
            d.mean_norms.push_back(norm);
        } else if (!key.empty()) {
            throw std::runtime_error("residual dump: unknown manifest key " + key);
        }
    }
    if (d.layers.size() != snaps) throw std::runtime_error("residual dump: snapshot count mismatch");
    return d;
}

// ---------------------------------------------------------------------------

namespace {

struct Dense {
    std::size_t in = 0, out = 0;
    std::size_t w = 0, b = 0;  // offsets into the flat parameter vector
};

struct VibNet {
    std::size_t d, hidden, latent, classes;
    Dense mu1, mu2, lv1, lv2, dec;
    std::size_t total = 0;

    VibNet(std::size_t d_, std::size_t h_, std::size_t l_, std::size_t k_) : d(d_), hidden(h_), latent(l_), classes(k_) {
        auto add = [&](std::size_t in, std::size_t out) {
            Dense x{in, out, total, total + in * out};
            total += in * out + out;
            return x;
        };
        mu1 = add(d, hidden);
        mu2 = add(hidden, latent);
        lv1 = add(d, hidden);
        lv2 = add(hidden, latent);
        dec = add(latent, classes);
    }
};

void dense_fwd(const Dense& L, const std::vector<double>& p, const double* x, double* y) {
    for (std::size_t o = 0; o < L.out; ++o) {
        double s = p[L.b + o];
        const double* w = p.data() + L.w + o * L.in;
        for (std::size_t i = 0; i < L.in; ++i) s += w[i] * x[i];
        y[o] = s;
    }
}

// accumulates parameter gradients and returns dx (when requested)
void dense_bwd(const Dense& L, const std::vector<double>& p, const double* x, const double* dy, std::vector<double>& g,
               double* dx) {
    for (std::size_t o = 0; o < L.out; ++o) {
        g[L.b + o] += dy[o];
        double* gw = g.data() + L.w + o * L.in;
        for (std::size_t i = 0; i < L.in; ++i) gw[i] += dy[o] * x[i];
    }
    if (dx) {
        std::fill(dx, dx + L.in, 0.0);
        for (std::size_t o = 0; o < L.out; ++o) {
            const double* w = p.data() + L.w + o * L.in;
            for (std::size_t i = 0; i < L.in; ++i) dx[i] += w[i] * dy[o];
        }
    }
}

struct VibPass {
    std::vector<double> a1, r1, mu, a2, r2, lv, eps, z, logits, prob;
    double ce = 0, kl = 0;
};

void vib_forward(const VibNet& net, const std::vector<double>& p, const std::vector<double>& x, std::size_t label,
                 const std::vector<double>& eps, VibPass& s) {
    s.a1.resize(net.hidden), s.r1.resize(net.hidden), s.a2.resize(net.hidden), s.r2.resize(net.hidden);
    s.mu.resize(net.latent), s.lv.resize(net.latent), s.z.resize(net.latent);
    s.logits.resize(net.classes);
    dense_fwd(net.mu1, p, x.data(), s.a1.data());
    dense_fwd(net.lv1, p, x.data(), s.a2.data());
    for (std::size_t i = 0; i < net.hidden; ++i) s.r1[i] = std::max(0.0, s.a1[i]), s.r2[i] = std::max(0.0, s.a2[i]);
    dense_fwd(net.mu2, p, s.r1.data(), s.mu.data());
    dense_fwd(net.lv2, p, s.r2.data(), s.lv.data());
    s.eps = eps;
    s.kl = 0;
    for (std::size_t i = 0; i < net.latent; ++i) {
        s.z[i] = s.mu[i] + std::exp(0.5 * s.lv[i]) * eps[i];
        s.kl += 0.5 * (s.mu[i] * s.mu[i] + std::exp(s.lv[i]) - s.lv[i] - 1.0);
    }
    dense_fwd(net.dec, p, s.z.data(), s.logits.data());
    s.prob = softmax(s.logits);
    s.ce = -std::log(std::max(s.prob[label], std::numeric_limits<double>::min()));
}

void vib_backward(const VibNet& net, const std::vector<double>& p, const std::vector<double>& x, std::size_t label,
                  double beta, const VibPass& s, std::vector<double>& g) {
    std::vector<double> dlog(s.prob), dz(net.latent), dmu(net.latent), dlv(net.latent);
    dlog[label] -= 1.0;
    dense_bwd(net.dec, p, s.z.data(), dlog.data(), g, dz.data());
    for (std::size_t i = 0; i < net.latent; ++i) {
        const double sd = std::exp(0.5 * s.lv[i]);
        dmu[i] = dz[i] + beta * s.mu[i];
        dlv[i] = dz[i] * s.eps[i] * 0.5 * sd + beta * 0.5 * (std::exp(s.lv[i]) - 1.0);
    }
    std::vector<double> dr1(net.hidden), dr2(net.hidden);
    dense_bwd(net.mu2, p, s.r1.data(), dmu.data(), g, dr1.data());
    dense_bwd(net.lv2, p, s.r2.data(), dlv.data(), g, dr2.data());
    for (std::size_t i = 0; i < net.hidden; ++i) {
        if (s.a1[i] <= 0) dr1[i] = 0;
        if (s.a2[i] <= 0) dr2[i] = 0;
    }
    dense_bwd(net.mu1, p, x.data(), dr1.data(), g, nullptr);
    dense_bwd(net.lv1, p, x.data(), dr2.data(), g, nullptr);
}

std::vector<std::vector<double>> standardise(const std::vector<VibExample>& data) {
    const std::size_t d = data.front().h.size();
    std::vector<double> mean(d, 0), sd(d, 0);
    for (const auto& e : data) {
        if (e.h.size() != d) throw ShapeError("vib_fit: inconsistent feature width");
        for (std::size_t j = 0; j < d; ++j) mean[j] += e.h[j];
    }
    for (auto& m : mean) m /= static_cast<double>(data.size());
    for (const auto& e : data)
        for (std::size_t j = 0; j < d; ++j) sd[j] += (e.h[j] - mean[j]) * (e.h[j] - mean[j]);
    for (auto& s : sd) {
        s = std::sqrt(s / static_cast<double>(data.size()));
        if (s < 1e-12) s = 1.0;
    }
    std::vector<std::vector<double>> out;
    for (const auto& e : data) {
        std::vector<double> x(d);
        for (std::size_t j = 0; j < d; ++j) x[j] = (e.h[j] - mean[j]) / sd[j];
        out.push_back(std::move(x));
    }
    return out;
}

}  // namespace

RDPoint vib_fit(const std::vector<VibExample>& data, std::size_t n_classes, double beta, const VibOptions& opt) {
    if (data.empty()) throw std::invalid_argument("vib_fit: empty probe set");
    if (n_classes < 1 || !(beta >= 0)) throw std::invalid_argument("vib_fit: need classes >= 1 and beta >= 0");
    for (const auto& e : data)
        if (e.label >= n_classes) throw std::out_of_range("vib_fit: label outside the class set");
    const auto xs = standardise(data);
    VibNet net(xs.front().size(), opt.hidden, opt.latent, n_classes);
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> nd;
    std::vector<double> p(net.total, 0.0);
    for (const Dense* L : {&net.mu1, &net.mu2, &net.lv1, &net.lv2, &net.dec}) {
        const double s = 1.0 / std::sqrt(static_cast<double>(L->in));
        for (std::size_t i = 0; i < L->in * L->out; ++i) p[L->w + i] = s * nd(rng);
    }
    std::vector<double> g(net.total), m(net.total, 0.0), v(net.total, 0.0);
    const double b1 = 0.9, b2 = 0.999, ae = 1e-8;
    std::size_t step = 0;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> eps(net.latent);
    VibPass pass;
    for (std::size_t ep = 0; ep < opt.epochs; ++ep) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t idx : order) {
            for (auto& e : eps) e = nd(rng);
            vib_forward(net, p, xs[idx], data[idx].label, eps, pass);
            const double obj = pass.ce + beta * pass.kl;
            if (!std::isfinite(obj)) throw NumericError("vib_fit: non-finite ELBO at step " + std::to_string(step));
            std::fill(g.begin(), g.end(), 0.0);
            vib_backward(net, p, xs[idx], data[idx].label, beta, pass, g);
            ++step;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = b1 * m[i] + (1 - b1) * g[i];
                v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
                p[i] -= opt.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + ae);
            }
        }
    }
    std::mt19937_64 erng(opt.seed ^ 0x5eedULL);
    RDPoint r{beta, 0, 0};
    for (std::size_t i = 0; i < data.size(); ++i) {
        double ce = 0;
        for (std::size_t s = 0; s < opt.eval_samples; ++s) {
            for (auto& e : eps) e = nd(erng);
            vib_forward(net, p, xs[i], data[i].label, eps, pass);
            ce += pass.ce;
        }
        r.distortion += ce / static_cast<double>(std::max<std::size_t>(opt.eval_samples, 1));
        r.rate += pass.kl;
    }
    r.distortion /= static_cast<double>(data.size());
    r.rate /= static_cast<double>(data.size());
    if (!std::isfinite(r.rate) || !std::isfinite(r.distortion)) throw NumericError("vib_fit: non-finite result");
    return r;
}

template <typename T>
ProbeSet make_probe_set(const Model<T>& model, const Vocab& vocab, const std::vector<TaskInstance>& data) {
    std::vector<std::size_t> first;
    std::set<std::string> names;
    for (const auto& inst : data) {
        auto a = vocab.encode(inst.answer);
        if (a.empty()) throw std::invalid_argument("probe set: empty answer");
        first.push_back(a.front());
        names.insert(vocab.token(a.front()));
    }
    ProbeSet set;
    set.classes.assign(names.begin(), names.end());
    std::map<std::string, std::size_t> cls;
    for (std::size_t i = 0; i < set.classes.size(); ++i) cls[set.classes[i]] = i;
    for (std::size_t k = 0; k < data.size(); ++k) {
        const auto ids = vocab.encode(data[k].prompt);
        const auto meta = meta_positions_of(ids, vocab.meta_id());
        if (meta.empty()) throw std::invalid_argument("probe set: prompt without meta tokens");
        std::size_t plain = ids.size();
        for (std::size_t t = ids.size(); t-- > 0;)
            if (ids[t] != vocab.meta_id()) {
                plain = t;
                break;
            }
        if (plain == ids.size()) throw std::invalid_argument("probe set: prompt without ordinary tokens");
        const auto tr = trace_forward(model, ids, meta);
        const auto& h = tr.residual.back();
        const std::size_t d = tr.d_model;
        const std::size_t label = cls.at(vocab.token(first[k]));
        auto row = [&](std::size_t t) {
            return std::vector<double>(h.begin() + static_cast<std::ptrdiff_t>(t * d),
                                       h.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
        };
        set.meta.push_back({row(meta.back()), label});
        set.plain.push_back({row(plain), label});
    }
    return set;
}

bool rate_nonincreasing(std::span<const RDPoint> curve, double rel_tol, double abs_tol) {
    for (std::size_t k = 1; k < curve.size(); ++k)
        if (curve[k].rate > (1.0 + rel_tol) * curve[k - 1].rate + abs_tol) return false;
    return true;
}

std::size_t dominance_violations(std::span<const RDPoint> a, std::span<const RDPoint> b, double tol) {
    if (b.empty()) return a.size();
    std::vector<RDPoint> s(b.begin(), b.end());
    std::sort(s.begin(), s.end(), [](const RDPoint& x, const RDPoint& y) { return x.rate < y.rate; });
    auto interp = [&](double r) {
        if (r <= s.front().rate) return s.front().distortion;
        if (r >= s.back().rate) return s.back().distortion;
        for (std::size_t k = 1; k < s.size(); ++k)
            if (r <= s[k].rate) {
                const double span = s[k].rate - s[k - 1].rate;
                const double w = span > 0 ? (r - s[k - 1].rate) / span : 1.0;
                return s[k - 1].distortion + w * (s[k].distortion - s[k - 1].distortion);
            }
        return s.back().distortion;
    };
    std::size_t v = 0;
    for (const auto& p : a) v += p.distortion > interp(p.rate) + tol;
    return v;
}

RDSweep rd_sweep(const ProbeSet& set, std::span<const double> betas, const VibOptions& opt) {
    RDSweep s;
    const std::size_t k = set.classes.size();
    for (double b : betas) {
        s.meta.push_back(vib_fit(set.meta, k, b, opt));
        s.plain.push_back(vib_fit(set.plain, k, b, opt));
    }
    s.dominance_violations = dominance_violations(s.meta, s.plain);
    s.meta_rate_monotone = rate_nonincreasing(s.meta);
    s.plain_rate_monotone = rate_nonincreasing(s.plain);
    return s;
}

std::string rd_csv(const RDSweep& s) {
    std::ostringstream o;
    o.precision(10);
    o << "probe,beta,rate,distortion\n";
    for (const auto& p : s.meta) o << "meta," << p.beta << ',' << p.rate << ',' << p.distortion << '\n';
    for (const auto& p : s.plain) o << "non_meta," << p.beta << ',' << p.rate << ',' << p.distortion << '\n';
    return o.str();
}

// ---------------------------------------------------------------------------

std::vector<double> content_bias(std::size_t t, std::span<const std::size_t> context, std::span<const double> f) {
    if (context.size() != t) throw ShapeError("content_bias: context length differs from T");
    std::vector<double> b(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) b[i * t + j] = f[context[j]];
    return b;
}

BiasFitReport bias_fit(std::size_t t, const std::vector<std::vector<std::size_t>>& contexts,
                       const std::vector<std::vector<double>>& targets) {
    if (contexts.empty() || contexts.size() != targets.size()) throw std::invalid_argument("bias_fit: need matching contexts and targets");
    std::map<std::size_t, std::size_t> tok;
    for (const auto& c : contexts) {
        if (c.size() != t) throw ShapeError("bias_fit: context length differs from T");
        for (auto x : c) tok.emplace(x, tok.size());
    }
    for (const auto& b : targets)
        if (b.size() != t * t) throw ShapeError("bias_fit: target must be T×T");
    const std::size_t rows = contexts.size() * t * (t + 1) / 2;
    Eigen::MatrixXd A_abs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(t));
    Eigen::MatrixXd A_rel = A_abs;
    Eigen::MatrixXd A_meta = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(tok.size()));
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows));
    Eigen::Index r = 0;
    for (std::size_t c = 0; c < contexts.size(); ++c)
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j <= i; ++j, ++r) {
                A_abs(r, static_cast<Eigen::Index>(j)) = 1;
                A_rel(r, static_cast<Eigen::Index>(i - j)) = 1;
                A_meta(r, static_cast<Eigen::Index>(tok.at(contexts[c][j]))) = 1;
                y(r) = targets[c][i * t + j];
            }
    auto resid = [&](const Eigen::MatrixXd& A) {
        const Eigen::VectorXd x = A.completeOrthogonalDecomposition().solve(y);
        return (A * x - y).norm();
    };
    BiasFitReport rep;
    rep.residual_abs = resid(A_abs);
    rep.residual_rel = resid(A_rel);
    rep.residual_meta = resid(A_meta);
    bool distinct = false;
    for (std::size_t c = 1; c < contexts.size(); ++c) distinct |= contexts[c] != contexts[0];
    rep.inconclusive = contexts.size() < 2 || !distinct || rep.residual_abs < 1e-9;
    return rep;
}

BiasFitReport bias_expressivity(std::size_t t, std::size_t n_contexts, std::mt19937_64& rng) {
    if (t < 2 || n_contexts < 1) throw std::invalid_argument("bias_expressivity: need T >= 2 and a context");
    // distinct, well separated token values so differing slots always disagree
    std::vector<double> f{-1.5, -0.5, 0.5, 1.5};
    std::shuffle(f.begin(), f.end(), rng);
    std::uniform_int_distribution<std::size_t> pick(0, f.size() - 1);
    std::vector<std::vector<std::size_t>> ctx;
    for (std::size_t attempt = 0; attempt < 1000; ++attempt) {
        ctx.assign(n_contexts, std::vector<std::size_t>(t));
        for (auto& c : ctx)
            for (auto& x : c) x = pick(rng);
        bool differs = n_contexts < 2;
        for (std::size_t c = 1; c < n_contexts; ++c) differs |= ctx[c] != ctx[0];
        if (differs) break;
    }
    std::vector<std::vector<double>> targets;
    for (const auto& c : ctx) targets.push_back(content_bias(t, c, f));
    return bias_fit(t, ctx, targets);
}

// ---------------------------------------------------------------------------

#define METATOK_PROBES(T)                                                                                        \
    template std::unique_ptr<Model<T>> clone_with(const Model<T>&, const ModelConfig&);                           \
    template AttentionTrace trace_forward(const Model<T>&, std::span<const std::size_t>,                          \
                                          std::span<const std::size_t>);                                         \
    template LogitBoostReport measure_boost(const Model<T>&, std::span<const Sequence>);                          \
    template SimilarityMap caching_similarity(const Model<T>&, std::span<const std::size_t>,                     \
                                              std::span<const std::size_t>);                                     \
    template ResidualDump residual_dump(const Model<T>&, std::span<const std::size_t>,                           \
                                        std::span<const std::size_t>, const std::filesystem::path&);             \
    template ProbeSet make_probe_set(const Model<T>&, const Vocab&, const std::vector<TaskInstance>&);
METATOK_PROBES(float)
METATOK_PROBES(double)
#undef METATOK_PROBES

}  // namespace metatok
