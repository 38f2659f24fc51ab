#include "metatok/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

namespace metatok {

namespace {

std::string escape(const std::string& tok) {
    std::string out;
    for (char c : tok) {
        if (c == '\\') out += "\\\\";
        else if (c == '\n') out += "\\n";
        else out += c;
    }
    return out;
}

std::string unescape(const std::string& line) {
    std::string out;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '\\' && i + 1 < line.size()) {
            out += line[i + 1] == 'n' ? '\n' : line[i + 1];
            ++i;
        } else {
            out += line[i];
        }
    }
    return out;
}

void push_word(std::vector<std::string>& out, std::string_view w) {
    while (!w.empty()) {
        const auto p = w.find(kMetaToken);
        if (p == std::string_view::npos) {
            out.emplace_back(w);
            return;
        }
        if (p > 0) out.emplace_back(w.substr(0, p));
        out.emplace_back(kMetaToken);
        w.remove_prefix(p + kMetaToken.size());
    }
}

}  // namespace

std::vector<std::string> utf8_chars(std::string_view s) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < s.size();) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        if (c >= 0xF0) len = 4;
        else if (c >= 0xE0) len = 3;
        else if (c >= 0xC0) len = 2;
        len = std::min(len, s.size() - i);
        out.emplace_back(s.substr(i, len));
        i += len;
    }
    return out;
}

std::vector<std::string> split_pieces(std::string_view text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    auto flush = [&](std::size_t end) {
        if (end > start) push_word(out, text.substr(start, end - start));
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == ' ' || c == '\t' || c == '\r') {
            flush(i);
            start = i + 1;
        } else if (c == '\n') {
            flush(i);
            out.emplace_back(kNewlineToken);
            start = i + 1;
        }
    }
    flush(text.size());
    return out;
}

void Vocab::add(const std::string& tok) {
    if (index_.count(tok)) return;
    index_[tok] = tokens_.size();
    tokens_.push_back(tok);
}

void Vocab::finish() {
    auto m = index_.find(std::string(kMetaToken));
    auto n = index_.find(std::string(kNewlineToken));
    if (m == index_.end() || n == index_.end() || tokens_.empty() || tokens_[0] != kUnkToken)
        throw std::runtime_error("vocab: missing reserved tokens");
    meta_id_ = m->second;
    newline_id_ = n->second;
}

Vocab Vocab::build(std::string_view corpus, const std::vector<std::string>& specials) {
    Vocab v;
    v.add(std::string(kUnkToken));
    v.add(std::string(kMetaToken));
    v.add(std::string(kNewlineToken));
    for (const auto& s : specials) v.add(s);
    v.n_special_ = v.tokens_.size();

    std::map<std::string, std::size_t> words, chars;
    for (const auto& p : split_pieces(corpus)) {
        if (v.index_.count(p)) continue;
        ++words[p];
        for (const auto& c : utf8_chars(p)) ++chars[c];
    }
    auto by_freq = [](const std::map<std::string, std::size_t>& m) {
        std::vector<std::pair<std::string, std::size_t>> items(m.begin(), m.end());
        std::stable_sort(items.begin(), items.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        return items;
    };
    for (const auto& [w, _] : by_freq(words)) v.add(w);
    for (const auto& [c, _] : by_freq(chars)) v.add(c);
    v.finish();
    return v;
}

std::optional<std::size_t> Vocab::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::vector<std::size_t> Vocab::encode(std::string_view text) const {
    std::vector<std::size_t> ids;
    for (const auto& p : split_pieces(text)) {
        if (auto it = index_.find(p); it != index_.end()) {
            ids.push_back(it->second);
            continue;
        }
        for (const auto& c : utf8_chars(p)) {
            auto jt = index_.find(c);
            ids.push_back(jt == index_.end() ? kUnkId : jt->second);
        }
    }
    return ids;
}

std::string Vocab::decode(std::span<const std::size_t> ids) const {
    std::string out;
    bool prev_newline = true;
    for (std::size_t id : ids) {
        const std::string& tok = tokens_.at(id);
        const bool nl = id == newline_id_;
        if (!prev_newline && !nl) out += ' ';
        out += tok;
        prev_newline = nl;
    }
    return out;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("vocab: cannot write " + path.string());
    f << "#specials " << n_special_ << '\n';
    for (const auto& t : tokens_) f << escape(t) << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("vocab: cannot read " + path.string());
    Vocab v;
    std::string line;
    if (!std::getline(f, line) || line.rfind("#specials ", 0) != 0)
        throw std::runtime_error("vocab: missing header in " + path.string());
    v.n_special_ = std::stoul(line.substr(10));
    while (std::getline(f, line)) {
        auto tok = unescape(line);
        if (v.index_.count(tok)) throw std::runtime_error("vocab: duplicate token in file");
        v.index_[tok] = v.tokens_.size();
        v.tokens_.push_back(tok);
    }
    v.finish();
    return v;
}

}  // namespace metatok
