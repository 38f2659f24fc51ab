#pragma once

// Closed word-level vocabulary with single-character fallback.
//
// Text is split on spaces; each newline is its own token; the literal
// "_PAUSE_" always maps to the reserved meta id. Id 0 is the unknown token.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace metatok {

inline constexpr std::string_view kMetaToken = "_PAUSE_";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kNewlineToken = "\n";

/// Splits text into word pieces, newline pieces and "_PAUSE_" pieces.
std::vector<std::string> split_pieces(std::string_view text);

class Vocab {
  public:
    static constexpr std::size_t kUnkId = 0;

    /// Ids: unk, specials (meta and newline always included), then words by
    /// frequency desc / lexicographic, then fallback characters missing so far.
    static Vocab build(std::string_view corpus, const std::vector<std::string>& specials = {});

    std::vector<std::size_t> encode(std::string_view text) const;
    std::string decode(std::span<const std::size_t> ids) const;

    std::size_t size() const { return tokens_.size(); }
    std::size_t meta_id() const { return meta_id_; }
    std::size_t newline_id() const { return newline_id_; }
    const std::string& token(std::size_t id) const { return tokens_.at(id); }
    std::optional<std::size_t> id(std::string_view token) const;
    bool is_special(std::size_t id) const { return id < n_special_; }

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

  private:
    void add(const std::string& tok);
    void finish();

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t meta_id_ = 0;
    std::size_t newline_id_ = 0;
    std::size_t n_special_ = 0;
};

/// UTF-8 code points of s as separate strings.
std::vector<std::string> utf8_chars(std::string_view s);

}  // namespace metatok
