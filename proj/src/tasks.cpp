#include "metatok/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "metatok/corpus.hpp"
#include "metatok/vocab.hpp"

namespace metatok {

namespace {

const std::string kPause(kMetaToken);
constexpr int kMaxAttempts = 10000;

int uniform(IntRange r, std::mt19937_64& rng) { return std::uniform_int_distribution<int>(r.lo, r.hi)(rng); }

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

std::string join_lines(const std::vector<std::string>& lines) {
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) out += (i ? "\n" : "") + lines[i];
    return out;
}

std::vector<std::size_t> pick_categories(int m, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(inventory().size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> u(static_cast<std::size_t>(i), idx.size() - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[u(rng)]);
    }
    idx.resize(static_cast<std::size_t>(m));
    return idx;
}

std::vector<std::string> draw_items(const Category& c, int n, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> u(0, c.items.size() - 1);
    std::vector<std::string> out(static_cast<std::size_t>(n));
    for (auto& w : out) w = c.items[u(rng)];
    return out;
}

TaskInstance finish(Task t, int phase, std::string prompt, std::string answer) {
    TaskInstance inst;
    inst.task = t;
    inst.phase = phase;
    inst.meta_count = count_meta(prompt);
    inst.prompt = std::move(prompt);
    inst.answer = std::move(answer);
    return inst;
}

template <typename Gen>
TaskInstance within_budget(const Phase& p, Gen gen) {
    for (int a = 0; a < kMaxAttempts; ++a) {
        auto inst = gen();
        if (prompt_pieces(inst.prompt) <= p.token_budget) return inst;
    }
    throw std::logic_error("task generator cannot meet the phase token budget");
}

[[noreturn]] void malformed(const std::string& why) { throw std::invalid_argument("malformed prompt: " + why); }

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::string line;
    std::istringstream in(s);
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

std::vector<std::string> words_of(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

// "Q: <head> ... <tail>" -> the text between head and tail
std::string between(const std::string& line, const std::string& head, const std::string& tail) {
    if (!starts_with(line, head) || line.size() < head.size() + tail.size() ||
        line.compare(line.size() - tail.size(), tail.size(), tail) != 0)
        malformed("unexpected question line: " + line);
    return line.substr(head.size(), line.size() - head.size() - tail.size());
}

const std::string& question_line(const std::vector<std::string>& lines) {
    if (lines.empty() || !starts_with(lines.back(), "Q: ")) malformed("missing question line");
    return lines.back();
}

}  // namespace

std::string to_string(Task t) {
    switch (t) {
        case Task::ListRecall: return "list_recall";
        case Task::SegmentCount: return "segment_count";
        case Task::Parity: return "parity";
        case Task::Copy: return "copy";
    }
    return "?";
}

Task task_from_string(const std::string& s) {
    for (Task t : kAllTasks)
        if (to_string(t) == s) return t;
    throw std::invalid_argument("unknown task: " + s);
}

Phase curriculum(int phase) {
    switch (phase) {
        case 1: return {1, {3, 8}, {{3, 10}}, 200, {3, 10}, {10, 40}};
        case 2: return {2, {8, 12}, {{3, 6}, {13, 16}}, 300, {5, 16}, {20, 100}};
        case 3: return {3, {12, 19}, {{3, 8}, {9, 16}, {17, 25}}, 700, {10, 25}, {100, 400}};
        case 4: return {4, {15, 20}, {{40, 60}}, 1024, {40, 60}, {200, 700}};
        case 5: return {5, {15, 20}, {{90, 110}}, 2048, {90, 110}, {500, 1500}};
        default: throw std::out_of_range("curriculum phase must be 1..5");
    }
}

int sample_list_length(const Phase& p, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> comp(0, p.n_mix.size() - 1);
    return uniform(p.n_mix[comp(rng)], rng);
}

const std::vector<Category>& inventory() {
    static const std::vector<Category> inv = {
        {"Fruits", {"orange", "peach", "banana", "plum", "apple", "pear", "mango", "cherry", "grape", "lemon"}},
        {"Tools", {"hammer", "wrench", "level", "pliers", "saw", "drill", "chisel", "screwdriver", "clamp", "file"}},
        {"Sports", {"boxing", "baseball", "golf", "tennis", "soccer", "hockey", "rugby", "cricket", "cycling", "rowing"}},
        {"Spices", {"turmeric", "cardamom", "cumin", "cinnamon", "nutmeg", "paprika", "saffron", "clove", "ginger", "pepper"}},
        {"Animals", {"cat", "tiger", "wolf", "fox", "horse", "rabbit", "bear", "deer", "otter", "zebra"}},
        {"Professions", {"teacher", "nurse", "lawyer", "architect", "doctor", "farmer", "pilot", "baker", "chef", "engineer"}},
        {"Vegetables", {"onion", "cucumber", "broccoli", "carrot", "potato", "spinach", "celery", "lettuce", "radish", "pumpkin"}},
        {"Instruments", {"piano", "clarinet", "violin", "guitar", "flute", "trumpet", "cello", "harp", "drum", "oboe"}},
        {"Colors", {"red", "blue", "green", "yellow", "purple", "brown", "black", "white", "pink", "gray"}},
        {"Countries", {"france", "spain", "italy", "japan", "brazil", "canada", "egypt", "kenya", "peru", "norway"}},
        {"Cities", {"paris", "london", "tokyo", "rome", "berlin", "madrid", "cairo", "lima", "oslo", "dublin"}},
        {"Birds", {"robin", "eagle", "sparrow", "owl", "falcon", "heron", "parrot", "crow", "swan", "finch"}},
        {"Trees", {"oak", "maple", "pine", "birch", "willow", "cedar", "elm", "ash", "spruce", "poplar"}},
        {"Metals", {"iron", "copper", "silver", "gold", "zinc", "tin", "nickel", "lead", "cobalt", "platinum"}},
        {"Vehicles", {"car", "bus", "truck", "train", "bicycle", "tram", "van", "scooter", "tractor", "taxi"}},
        {"Clothing", {"shirt", "jacket", "scarf", "sweater", "coat", "dress", "skirt", "glove", "sock", "hat"}},
        {"Furniture", {"chair", "table", "sofa", "desk", "bed", "shelf", "stool", "cabinet", "bench", "dresser"}},
        {"Drinks", {"tea", "coffee", "juice", "milk", "water", "soda", "cocoa", "cider", "lemonade", "broth"}},
        {"Flowers", {"rose", "tulip", "daisy", "lily", "orchid", "poppy", "iris", "lotus", "peony", "jasmine"}},
        {"Gems", {"ruby", "emerald", "diamond", "sapphire", "opal", "pearl", "topaz", "garnet", "amber", "jade"}},
    };
    return inv;
}

std::size_t prompt_pieces(const std::string& text) { return split_pieces(text).size(); }

std::size_t count_meta(const std::string& text) {
    std::size_t n = 0;
    for (auto p = text.find(kPause); p != std::string::npos; p = text.find(kPause, p + kPause.size())) ++n;
    return n;
}

TaskInstance gen_list_recall(int phase, std::mt19937_64& rng) {
    const Phase p = curriculum(phase);
    return within_budget(p, [&] {
        const int m = uniform(p.m, rng);
        const auto cats = pick_categories(m, rng);
        std::vector<std::string> lines;
        std::vector<std::vector<std::string>> lists;
        for (auto c : cats) {
            lists.push_back(draw_items(inventory()[c], sample_list_length(p, rng), rng));
            lines.push_back(inventory()[c].name + ": " + join(lists.back()));
        }
        std::uniform_int_distribution<std::size_t> tpick(0, cats.size() - 1);
        const std::size_t t = tpick(rng);
        const auto& items = lists[t];
        std::uniform_int_distribution<std::size_t> jpick(1, items.size());
        const std::size_t j = jpick(rng);
        std::vector<std::string> marked(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(j));
        marked.push_back(kPause);
        marked.insert(marked.end(), items.begin() + static_cast<std::ptrdiff_t>(j), items.end());
        const auto& name = inventory()[cats[t]].name;
        lines.push_back(name + ": " + join(marked));
        lines.push_back("Q: What is item " + std::to_string(j) + " of " + name + "? " + kPause);
        return finish(Task::ListRecall, phase, join_lines(lines), items[j - 1]);
    });
}

TaskInstance gen_segment_count(int phase, std::mt19937_64& rng) {
    const Phase p = curriculum(phase);
    return within_budget(p, [&] {
        const int m = uniform(p.m, rng);
        const auto cats = pick_categories(m, rng);
        std::uniform_int_distribution<std::size_t> tpick(0, cats.size() - 1);
        const std::size_t t = tpick(rng);
        std::vector<std::string> lines, segment;
        for (std::size_t i = 0; i < cats.size(); ++i) {
            auto items = draw_items(inventory()[cats[i]], sample_list_length(p, rng), rng);
            if (i == t) {
                segment = items;
                lines.push_back(inventory()[cats[i]].name + ": " + kPause + " " + join(items) + " " + kPause);
            } else {
                lines.push_back(inventory()[cats[i]].name + ": " + join(items));
            }
        }
        // half the queries name an item from the segment, half any item of the category
        const auto& cat = inventory()[cats[t]];
        std::string query;
        if (std::bernoulli_distribution(0.5)(rng)) {
            query = segment[std::uniform_int_distribution<std::size_t>(0, segment.size() - 1)(rng)];
        } else {
            query = cat.items[std::uniform_int_distribution<std::size_t>(0, cat.items.size() - 1)(rng)];
        }
        const auto count = std::count(segment.begin(), segment.end(), query);
        lines.push_back("Q: How many times does " + query + " appear between the pauses around " + cat.name + "? " +
                        kPause);
        return finish(Task::SegmentCount, phase, join_lines(lines), std::to_string(count));
    });
}

TaskInstance gen_parity_bits(std::size_t n_bits, std::mt19937_64& rng, int phase) {
    if (n_bits == 0) throw std::invalid_argument("gen_parity_bits: need at least one bit");
    std::bernoulli_distribution bit(0.5);
    std::uniform_int_distribution<std::size_t> split(1, n_bits);
    const std::size_t s = split(rng);
    std::vector<std::string> words{"Bits:"};
    int x = 0;
    for (std::size_t i = 0; i < n_bits; ++i) {
        const int b = bit(rng);
        if (i < s) x ^= b;
        words.push_back(b ? "1" : "0");
        if (i + 1 == s) words.push_back(kPause);
    }
    std::string prompt = join(words) + "\nQ: What is the XOR of all bits before this pause? " + kPause;
    return finish(Task::Parity, phase, std::move(prompt), x ? "1" : "0");
}

TaskInstance gen_parity(int phase, std::mt19937_64& rng) {
    const Phase p = curriculum(phase);
    // bits line, pause, newline and the 12-piece question
    const std::size_t overhead = 15;
    const int m = uniform(p.m, rng), n = sample_list_length(p, rng);
    const std::size_t bits = std::min<std::size_t>(static_cast<std::size_t>(m * n), p.token_budget - overhead);
    return gen_parity_bits(bits, rng, phase);
}

TaskInstance gen_copy(int phase, std::mt19937_64& rng) {
    const Phase p = curriculum(phase);
    const auto& src = copy_source_words();
    return within_budget(p, [&] {
        const auto c = static_cast<std::size_t>(uniform(p.copy_len, rng));
        const auto d = static_cast<std::size_t>(uniform(p.copy_distance, rng));
        const auto lead = static_cast<std::size_t>(uniform({1, 8}, rng));
        const std::size_t total = lead + c + d;
        std::uniform_int_distribution<std::size_t> start(0, src.size() - total);
        const std::size_t s = start(rng);
        std::vector<std::string> words{"..."};
        words.insert(words.end(), src.begin() + static_cast<std::ptrdiff_t>(s),
                     src.begin() + static_cast<std::ptrdiff_t>(s + lead));
        words.push_back(kPause);
        std::vector<std::string> span(src.begin() + static_cast<std::ptrdiff_t>(s + lead),
                                      src.begin() + static_cast<std::ptrdiff_t>(s + lead + c));
        words.insert(words.end(), span.begin(), span.end());
        words.push_back(kPause);
        words.insert(words.end(), src.begin() + static_cast<std::ptrdiff_t>(s + lead + c),
                     src.begin() + static_cast<std::ptrdiff_t>(s + total));
        std::string prompt = join(words) + "\nQ: Copy the bracketed text. " + kPause;
        return finish(Task::Copy, phase, std::move(prompt), join(span));
    });
}

TaskInstance generate_task(Task t, int phase, std::mt19937_64& rng) {
    switch (t) {
        case Task::ListRecall: return gen_list_recall(phase, rng);
        case Task::SegmentCount: return gen_segment_count(phase, rng);
        case Task::Parity: return gen_parity(phase, rng);
        case Task::Copy: return gen_copy(phase, rng);
    }
    throw std::invalid_argument("unknown task");
}

std::string oracle(Task t, const std::string& prompt) {
    const auto lines = lines_of(prompt);
    const auto& q = question_line(lines);
    const std::string tail = "? " + kPause;
    switch (t) {
        case Task::ListRecall: {
            const auto body = between(q, "Q: What is item ", tail);
            const auto sep = body.find(" of ");
            if (sep == std::string::npos) malformed("no category in question");
            std::size_t j = 0;
            try {
                j = std::stoul(body.substr(0, sep));
            } catch (const std::exception&) {
                malformed("bad item index");
            }
            const std::string cat = body.substr(sep + 4) + ":";
            for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
                auto w = words_of(lines[i]);
                if (w.empty() || w[0] != cat) continue;
                std::vector<std::string> items;
                for (std::size_t k = 1; k < w.size(); ++k)
                    if (w[k] != kPause) items.push_back(w[k]);
                if (j == 0 || j > items.size()) malformed("item index past the list");
                return items[j - 1];
            }
            malformed("category not listed");
        }
        case Task::SegmentCount: {
            const auto body = between(q, "Q: How many times does ", tail);
            const auto sep = body.find(" appear between the pauses around ");
            if (sep == std::string::npos) malformed("bad counting question");
            const std::string item = body.substr(0, sep);
            const std::string cat = body.substr(sep + 34) + ":";
            for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
                auto w = words_of(lines[i]);
                if (w.empty() || w[0] != cat) continue;
                auto a = std::find(w.begin(), w.end(), kPause);
                if (a == w.end()) continue;
                auto b = std::find(a + 1, w.end(), kPause);
                if (b == w.end()) malformed("segment not closed");
                return std::to_string(std::count(a + 1, b, item));
            }
            malformed("no bracketed segment for the category");
        }
        case Task::Parity: {
            if (q != "Q: What is the XOR of all bits before this pause? " + kPause) malformed("bad parity question");
            for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
                auto w = words_of(lines[i]);
                if (w.empty() || w[0] != "Bits:") continue;
                int x = 0;
                std::size_t n = 0;
                for (std::size_t k = 1; k < w.size() && w[k] != kPause; ++k, ++n) {
                    if (w[k] != "0" && w[k] != "1") malformed("non-bit token " + w[k]);
                    x ^= w[k] == "1";
                }
                if (n == 0) malformed("no bits before the pause");
                if (std::find(w.begin(), w.end(), kPause) == w.end()) malformed("no pause in the bit string");
                return x ? "1" : "0";
            }
            malformed("no bit string");
        }
        case Task::Copy: {
            if (q != "Q: Copy the bracketed text. " + kPause) malformed("bad copy question");
            const auto qpos = prompt.rfind("\nQ: ");
            const std::string body = prompt.substr(0, qpos);
            const auto a = body.find(kPause);
            if (a == std::string::npos) malformed("no opening pause");
            const auto b = body.find(kPause, a + kPause.size());
            if (b == std::string::npos) malformed("no closing pause");
            std::string span = body.substr(a + kPause.size(), b - a - kPause.size());
            const auto first = span.find_first_not_of(' ');
            if (first == std::string::npos) malformed("empty span");
            const auto last = span.find_last_not_of(' ');
            return span.substr(first, last - first + 1);
        }
    }
    malformed("unknown task");
}

std::string normalize_answer(std::string s) {
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s;
}

std::vector<TaskInstance> make_dataset(Task t, int phase, std::size_t count, std::mt19937_64& rng) {
    std::vector<TaskInstance> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_task(t, phase, rng));
    return out;
}

void write_dataset(const std::vector<TaskInstance>& items, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    for (const auto& it : items) {
        nlohmann::ordered_json j;
        j["task"] = to_string(it.task);
        j["phase"] = it.phase;
        j["prompt"] = it.prompt;
        j["answer"] = it.answer;
        f << j.dump() << '\n';
    }
    if (!f) throw std::runtime_error("failed writing " + path.string());
}

void emit_dataset(Task t, int phase, std::size_t count, std::mt19937_64& rng, const std::filesystem::path& path) {
    write_dataset(make_dataset(t, phase, count, rng), path);
}

std::vector<TaskInstance> read_dataset(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::vector<TaskInstance> out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(f, line)) {
        ++no;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            TaskInstance it;
            it.task = task_from_string(j.at("task").get<std::string>());
            it.phase = j.at("phase").get<int>();
            it.prompt = j.at("prompt").get<std::string>();
            it.answer = j.at("answer").get<std::string>();
            it.meta_count = count_meta(it.prompt);
            out.push_back(std::move(it));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(no) + ": malformed line: " + e.what());
        }
    }
    return out;
}

std::string task_lexicon() {
    std::string out = "Q: What is item of How many times does appear between the pauses around XOR all bits "
                      "before this pause? Copy bracketed text. Bits: ... 0 1 ";
    out += kPause + "\n";
    for (const auto& c : inventory()) {
        out += c.name + ": " + c.name + "?";
        for (const auto& w : c.items) out += " " + w;
        out += "\n";
    }
    for (int i = 0; i <= 256; ++i) out += std::to_string(i) + " ";
    out += "\n";
    return out;
}

}  // namespace metatok
