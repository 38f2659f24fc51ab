#include "metatok/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

namespace metatok {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

bool parse_uint_strict(const std::string& s, std::uint64_t& v) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

bool parse_double_strict(const std::string& s, double& v) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

bool valid(RunConfig::Kind kind, const std::string& v) {
    std::uint64_t u;
    double d;
    switch (kind) {
        case RunConfig::Kind::Uint: return parse_uint_strict(v, u);
        case RunConfig::Kind::Double: return parse_double_strict(v, d);
        case RunConfig::Kind::Bool: return v == "true" || v == "false" || v == "1" || v == "0";
        case RunConfig::Kind::String: return true;
        case RunConfig::Kind::UintList:
            for (const auto& s : split_list(v))
                if (!parse_uint_strict(s, u)) return false;
            return true;
        case RunConfig::Kind::DoubleList:
            for (const auto& s : split_list(v))
                if (!parse_double_strict(s, d)) return false;
            return true;
    }
    return false;
}

const char* kind_name(RunConfig::Kind k) {
    switch (k) {
        case RunConfig::Kind::Uint: return "unsigned integer";
        case RunConfig::Kind::Double: return "number";
        case RunConfig::Kind::Bool: return "boolean";
        case RunConfig::Kind::String: return "string";
        case RunConfig::Kind::UintList: return "comma-separated integer list";
        case RunConfig::Kind::DoubleList: return "comma-separated number list";
    }
    return "?";
}

std::string fmt(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

RunConfig::RunConfig() {
    using K = Kind;
    const ModelConfig m;
    const TrainConfig t;
    const VibOptions vo;
    const YarnParams y;
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    auto u = [](std::uint64_t v) { return std::to_string(v); };
    std::string betas;
    for (double x : kBetaGrid) betas += (betas.empty() ? "" : ",") + fmt(x);
    std::string bins;
    for (auto x : kDefaultBins) bins += (bins.empty() ? "" : ",") + std::to_string(x);

    entries_ = {
        {"out", K::String, "runs", "root of the run directories"},
        {"seed", K::Uint, "7", "seed for data, initialisation and batch order"},
        // model
        {"n_layers", K::Uint, u(m.n_layers), "transformer blocks"},
        {"n_heads", K::Uint, u(m.n_heads), "attention heads"},
        {"d_model", K::Uint, u(m.d_model), "residual width"},
        {"block_size", K::Uint, u(m.block_size), "training context length"},
        {"vocab_size", K::Uint, "0", "0 takes the vocabulary size"},
        {"pe_mode", K::String, to_string(m.pe.mode), "ape | rope | nope"},
        {"rope_base", K::Double, fmt(m.pe.rope_base), "rotary base"},
        {"yarn", K::Bool, "false", "enable YaRN context extension"},
        {"yarn_scale", K::Double, fmt(y.scale), "YaRN scale"},
        {"yarn_original_max_seq_len", K::Uint, u(y.original_max_seq_len), "YaRN original context"},
        {"yarn_extrapolation_factor", K::Double, fmt(y.extrapolation_factor), "YaRN extrapolation factor"},
        {"yarn_attn_factor", K::Double, fmt(y.attn_factor), "YaRN attention factor"},
        {"yarn_beta_fast", K::Double, fmt(y.beta_fast), "YaRN fast boundary"},
        {"yarn_beta_slow", K::Double, fmt(y.beta_slow), "YaRN slow boundary"},
        {"noise_sigma", K::Double, fmt(m.pe.noise_sigma), "Gaussian positional noise"},
        {"zero_at_meta", K::Bool, b(m.pe.zero_at_meta), "remove positional signal at meta rows"},
        {"zero_embed_at_meta", K::Bool, b(m.pe.zero_embed_at_meta), "zero token embedding at meta rows"},
        {"meta_fraction", K::Double, fmt(m.meta_fraction), "meta tokens injected per pretraining token"},
        {"dropout", K::Double, fmt(m.dropout), "dropout rate"},
        {"meta_attention", K::Bool, b(m.meta_attention), "meta sublayer present"},
        {"retarget_loss", K::Bool, b(m.retarget_loss), "meta targets learn the next real token"},
        {"ln_eps", K::Double, fmt(m.ln_eps), "layer norm epsilon"},
        // training
        {"lr", K::Double, "0.001", "peak learning rate"},
        {"min_lr", K::Double, "0.0001", "final learning rate"},
        {"weight_decay", K::Double, fmt(t.weight_decay), "decoupled weight decay"},
        {"beta1", K::Double, fmt(t.beta1), "Adam beta1"},
        {"beta2", K::Double, fmt(t.beta2), "Adam beta2"},
        {"adam_eps", K::Double, fmt(t.eps), "Adam epsilon"},
        {"grad_clip", K::Double, fmt(t.grad_clip), "global gradient norm limit"},
        {"warmup_iters", K::Uint, "100", "linear warmup steps"},
        {"max_iters", K::Uint, "2000", "optimizer steps (split across fine-tune phases)"},
        {"batch_size", K::Uint, "4", "sequences per micro-batch"},
        {"grad_accum", K::Uint, u(t.grad_accum), "micro-batches per step"},
        {"eval_interval", K::Uint, u(t.eval_interval), "steps between held-out evaluations"},
        {"eval_batches", K::Uint, u(t.eval_batches), "batches per held-out evaluation"},
        {"log_interval", K::Uint, "50", "steps between log lines"},
        {"pretrain_sentences", K::Uint, "4000", "synthetic sentences in the pretraining corpus"},
        // data and checkpoints
        {"task", K::String, "parity", "list_recall | segment_count | parity | copy | all, comma list"},
        {"phases", K::UintList, "1,2", "curriculum phases"},
        {"phase", K::String, "", "shorthand for phases"},
        {"count", K::Uint, "2000", "training instances per task and phase"},
        {"test_count", K::Uint, "200", "evaluation instances per task and phase"},
        {"data", K::String, "", "JSONL training files, comma list (overrides generation)"},
        {"test_data", K::String, "", "JSONL evaluation files, comma list (overrides generation)"},
        {"checkpoint", K::String, "", "checkpoint directory to start from"},
        {"vocab", K::String, "", "vocabulary file (default: checkpoint copy or built-in)"},
        // evaluation and ablations
        {"bins", K::UintList, bins, "upper edges of the prompt-length bins"},
        {"kernel", K::String, "compact", "meta attention kernel for evaluation: dense | compact"},
        {"mode", K::String, "no-pos,no-embed,neither", "ablation columns besides full"},
        {"noise_grid", K::DoubleList, "0,0.1,0.5,1,2", "positional noise levels, empty to skip"},
        // benchmark
        {"bench_runs", K::Uint, u(BenchOptions{}.runs), "timed runs after one warmup"},
        {"bench_tokens", K::Uint, u(BenchOptions{}.new_tokens), "decoded tokens per run"},
        {"bench_kernel", K::String, "dense", "dense | compact"},
        {"bench_prompts", K::Uint, "8", "prompts cycled through the runs"},
        // probes
        {"check", K::String, "all", "theorem41 | covariance | boost | similarity | residuals | bias | all"},
        {"theorem_trials", K::Uint, "1000", "random logit vectors per size"},
        {"theorem_sizes", K::UintList, "2,8,64", "logit vector sizes"},
        {"delta_grid", K::DoubleList, "0.1,0.5,1,2,5", "logit boosts"},
        {"bias_len", K::UintList, "2,3,4,5,6", "sequence lengths for the bias fits"},
        {"bias_trials", K::Uint, "20", "instances per length"},
        {"probe_count", K::Uint, "64", "sequences analysed by the model probes"},
        {"betas", K::DoubleList, betas, "information bottleneck weights"},
        {"vib_latent", K::Uint, u(vo.latent), "bottleneck width"},
        {"vib_hidden", K::Uint, u(vo.hidden), "encoder hidden width"},
        {"vib_epochs", K::Uint, u(vo.epochs), "passes over the probe set"},
        {"vib_samples", K::Uint, u(vo.eval_samples), "latent samples per evaluation"},
        {"vib_lr", K::Double, fmt(vo.lr), "probe learning rate"},
    };
}

RunConfig::Entry& RunConfig::find(const std::string& key) {
    for (auto& e : entries_)
        if (e.key == key) return e;
    throw ConfigError("unknown config key: " + key);
}

const RunConfig::Entry& RunConfig::find(const std::string& key) const {
    return const_cast<RunConfig*>(this)->find(key);
}

bool RunConfig::has(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.key == key; });
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "phase") {
        if (!valid(Kind::UintList, value)) throw ConfigError("bad value for phase: expected integer list, got '" + value + "'");
        find("phase").value = value;
        find("phases").value = value;
        return;
    }
    Entry& e = find(key);
    if (!valid(e.kind, value))
        throw ConfigError("bad value for " + key + ": expected " + kind_name(e.kind) + ", got '" + value + "'");
    e.value = value;
}

const std::string& RunConfig::get(const std::string& key) const { return find(key).value; }

void RunConfig::load_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        try {
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    load_text(ss.str(), path.string());
}

std::uint64_t RunConfig::get_uint(const std::string& key) const {
    std::uint64_t v = 0;
    parse_uint_strict(get(key), v);
    return v;
}

double RunConfig::get_double(const std::string& key) const {
    double v = 0;
    parse_double_strict(get(key), v);
    return v;
}

bool RunConfig::get_bool(const std::string& key) const {
    const auto& v = get(key);
    return v == "true" || v == "1";
}

std::vector<std::size_t> RunConfig::get_uint_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : split_list(get(key))) {
        std::uint64_t v = 0;
        parse_uint_strict(s, v);
        out.push_back(v);
    }
    return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : split_list(get(key))) {
        double v = 0;
        parse_double_strict(s, v);
        out.push_back(v);
    }
    return out;
}

std::vector<std::string> RunConfig::get_string_list(const std::string& key) const { return split_list(get(key)); }

std::string RunConfig::render() const {
    std::string out;
    for (const auto& e : entries_) {
        if (e.key == "phase") continue;
        out += e.key + "=" + e.value + "\n";
    }
    return out;
}

ModelConfig RunConfig::model() const {
    std::vector<std::pair<std::string, std::string>> fields;
    for (const auto& [k, v] : config_fields(ModelConfig{})) {
        if (k == "seed") fields.emplace_back(k, get("seed"));
        else if (k == "meta_id" || k == "newline_id") fields.emplace_back(k, v);
        else if (k == "yarn" || k == "zero_at_meta" || k == "zero_embed_at_meta" || k == "meta_attention" ||
                 k == "retarget_loss")
            fields.emplace_back(k, get_bool(k) ? "true" : "false");
        else fields.emplace_back(k, get(k));
    }
    try {
        return config_from_fields(fields);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

TrainConfig RunConfig::train() const {
    TrainConfig t;
    t.lr = get_double("lr");
    t.min_lr = get_double("min_lr");
    t.weight_decay = get_double("weight_decay");
    t.beta1 = get_double("beta1");
    t.beta2 = get_double("beta2");
    t.eps = get_double("adam_eps");
    t.grad_clip = get_double("grad_clip");
    t.warmup_iters = get_uint("warmup_iters");
    t.max_iters = get_uint("max_iters");
    t.batch_size = get_uint("batch_size");
    t.grad_accum = get_uint("grad_accum");
    t.eval_interval = get_uint("eval_interval");
    t.eval_batches = get_uint("eval_batches");
    t.log_interval = get_uint("log_interval");
    t.seed = get_uint("seed");
    try {
        t.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return t;
}

VibOptions RunConfig::vib() const {
    VibOptions o;
    o.latent = get_uint("vib_latent");
    o.hidden = get_uint("vib_hidden");
    o.epochs = get_uint("vib_epochs");
    o.eval_samples = get_uint("vib_samples");
    o.lr = get_double("vib_lr");
    o.seed = get_uint("seed");
    return o;
}

std::vector<Task> RunConfig::tasks() const {
    std::vector<Task> out;
    for (const auto& s : get_string_list("task")) {
        if (s == "all") {
            out.assign(kAllTasks.begin(), kAllTasks.end());
            return out;
        }
        try {
            out.push_back(task_from_string(s));
        } catch (const std::exception& e) {
            throw ConfigError(std::string("task: ") + e.what());
        }
    }
    if (out.empty()) throw ConfigError("task: at least one task is required");
    return out;
}

std::vector<int> RunConfig::phases() const {
    std::vector<int> out;
    for (auto p : get_uint_list("phases")) {
        if (p < 1 || p > 5) throw ConfigError("phases: phase " + std::to_string(p) + " outside 1..5");
        out.push_back(static_cast<int>(p));
    }
    if (out.empty()) throw ConfigError("phases: at least one phase is required");
    return out;
}

std::vector<AblationMode> RunConfig::ablation_modes() const {
    std::vector<AblationMode> out{AblationMode::Full};
    for (const auto& s : get_string_list("mode")) {
        AblationMode m;
        try {
            m = ablation_from_string(s);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("mode: ") + e.what());
        }
        if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    }
    return out;
}

MetaKernel RunConfig::kernel(const std::string& key) const {
    const auto& v = get(key);
    if (v == "dense") return MetaKernel::Dense;
    if (v == "compact") return MetaKernel::Compact;
    throw ConfigError(key + ": expected dense or compact, got '" + v + "'");
}

std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& command) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    const auto parent = out / command;
    std::filesystem::create_directories(parent);
    for (int n = 0;; ++n) {
        auto dir = parent / (n == 0 ? std::string(stamp) : std::string(stamp) + "-" + std::to_string(n));
        if (std::filesystem::create_directory(dir)) return dir;
    }
}

}  // namespace metatok
