#pragma once

// Bundled text for pretraining, vocabulary building and the copy task.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace metatok {

/// Hand-written period prose, paragraphs separated by blank lines.
std::string_view prose_passage();

/// Sentences from a small English grammar; deterministic given rng.
std::string synthetic_english(std::size_t n_sentences, std::mt19937_64& rng);

/// Every word the grammar can emit.
const std::vector<std::string>& grammar_lexicon();

/// Prose plus a fixed synthetic tail, newlines flattened, split on spaces.
const std::vector<std::string>& copy_source_words();

/// Text covering every token the tasks and the corpus can produce.
std::string vocab_corpus();

/// Prose, synthetic English and task-shaped lines for language-model pretraining.
std::string pretraining_corpus(std::size_t n_sentences, std::uint64_t seed);

}  // namespace metatok
