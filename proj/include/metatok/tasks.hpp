#pragma once

// Synthetic tasks: list recall, segment counting, parity and copying.
//
// Every prompt is line-structured text ending in a question line
// "Q: ... _PAUSE_". Answers never contain a newline, since generation
// stops at the newline token.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace metatok {

enum class Task { ListRecall, SegmentCount, Parity, Copy };
inline constexpr std::array<Task, 4> kAllTasks = {Task::ListRecall, Task::SegmentCount, Task::Parity, Task::Copy};

std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct TaskInstance {
    Task task = Task::ListRecall;
    int phase = 1;
    std::string prompt;
    std::string answer;
    std::size_t meta_count = 0;

    bool operator==(const TaskInstance&) const = default;
};

struct IntRange {
    int lo = 0, hi = 0;
};

struct Phase {
    int index = 1;
    IntRange m;                    // number of categories
    std::vector<IntRange> n_mix;   // list length: a component is picked uniformly, then a value in it
    std::size_t token_budget = 0;  // prompt pieces
    IntRange copy_len;             // C
    IntRange copy_distance;        // D
};

/// Throws std::out_of_range for phases outside 1..5.
Phase curriculum(int phase);

int sample_list_length(const Phase& p, std::mt19937_64& rng);

struct Category {
    std::string name;
    std::array<std::string, 10> items;
};
const std::vector<Category>& inventory();

/// Pieces the prompt splits into (its token count under a covering vocabulary).
std::size_t prompt_pieces(const std::string& text);

TaskInstance gen_list_recall(int phase, std::mt19937_64& rng);
TaskInstance gen_segment_count(int phase, std::mt19937_64& rng);
TaskInstance gen_parity(int phase, std::mt19937_64& rng);
TaskInstance gen_copy(int phase, std::mt19937_64& rng);
/// Parity instance with exactly n_bits bits; the phase tag is carried through.
TaskInstance gen_parity_bits(std::size_t n_bits, std::mt19937_64& rng, int phase = 1);
TaskInstance generate_task(Task t, int phase, std::mt19937_64& rng);

/// Recomputes the answer from the prompt alone. Throws std::invalid_argument
/// starting "malformed prompt" when the prompt does not parse.
std::string oracle(Task t, const std::string& prompt);
inline std::string oracle(const TaskInstance& inst) { return oracle(inst.task, inst.prompt); }

/// Exact-match rule: trailing spaces, tabs and newlines removed.
std::string normalize_answer(std::string s);

std::size_t count_meta(const std::string& text);

std::vector<TaskInstance> make_dataset(Task t, int phase, std::size_t count, std::mt19937_64& rng);
void write_dataset(const std::vector<TaskInstance>& items, const std::filesystem::path& path);
void emit_dataset(Task t, int phase, std::size_t count, std::mt19937_64& rng, const std::filesystem::path& path);
std::vector<TaskInstance> read_dataset(const std::filesystem::path& path);

/// Every token the four generators can place in a prompt or answer, copy text aside.
std::string task_lexicon();

}  // namespace metatok
