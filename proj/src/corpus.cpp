#include "metatok/corpus.hpp"

#include <array>
#include <set>
#include <sstream>

#include "metatok/tasks.hpp"
#include "metatok/vocab.hpp"

namespace metatok {

namespace {

constexpr std::string_view kProse = R"(It was generally agreed in the neighbourhood that Mrs Harville had never been so pleased with a summer as with this one. Her eldest daughter was engaged, her second was admired, and the house at Kellynch Cross had been let to a family of fortune who gave dinners twice a week and asked everybody.

Anne, the second daughter, was not so easily satisfied. She had watched the new tenants with the patient attention of one who expects very little and is seldom disappointed. Mr Wentworth, the master of the house, was civil and quiet; his sister was lively and talked a great deal; and the friend who had come with them from town, a Captain Elliot, was said by all the ladies to be the most agreeable man they had ever seen.

"I cannot think what you find to object to in him," said her mother one morning, as they sat at work in the little parlour. "He has the best manners in the world, and he is very handsome, and he told Mrs Musgrove that he was fond of the country."

"I do not object to him at all," said Anne. "I only observe that he is fond of whatever is before him. Yesterday it was the country, and the day before it was music, and this morning, I dare say, it will be the weather."

Her mother laughed, and said she was too severe; but she did not deny it.

The Wentworths gave a ball at the end of June. It was the first that had been seen at the Cross for many years, and the whole parish was in a state of expectation for a fortnight before it. Anne went because her sister would not go without her, and because she had no good reason to stay at home. She danced twice with young Mr Musgrove, once with a cousin of the family, and once, near the end of the evening, with Captain Elliot himself.

He was very pleasant. He talked of the sea, where he had served, and of Bath, where he had been idle, and of books, which he had not read but had heard praised. He asked her opinion on everything and agreed with it before she had finished giving it. When the dance was over he thanked her warmly, and went directly to the other end of the room to ask her sister.

Anne sat down by the window and was ashamed to find that she was a little mortified. She had not wished to be admired; she had only wished not to be so plainly forgotten. But she was too sensible to dwell upon it long, and by the time the carriage came she had quite recovered her spirits and was able to laugh at the whole affair with her sister on the way home.

It was several weeks before she saw him again. The weather turned wet, the roads were bad, and the families kept to their own firesides. When at last the sun returned, Anne walked out alone across the fields towards the village, and at the stile by the old mill she found Captain Elliot sitting on the rail with a book open on his knee.

He rose when he saw her, and closed the book rather quickly, and said he had been waiting for the rain to clear. She could not help noticing that the rain had cleared some hours before. They walked on together as far as the church, and he was less agreeable than at the ball, and a good deal more sincere.

He told her that he had been unhappy in town, that he had debts which his friend had generously paid, and that he had come into the country chiefly because he had nowhere else to go. He said that he envied her family their ease and their affection for one another. He said that he had never had a home worth the name.

Anne listened, and said very little, and was sorry for him. She thought him weak rather than wicked, and she thought that a man who could speak so openly of his faults might yet mend them. When they parted at the church gate he begged her not to repeat what he had said, and she promised readily; she had no wish to repeat it.

The autumn brought changes. Her elder sister was married in September and went away to a house in Somerset. Mr Wentworth was called to town on business and did not return. His sister stayed on at the Cross with Captain Elliot for company, and the dinners grew fewer and the company smaller, until at last it was understood in the parish that the house would be given up at Christmas.

Anne saw Captain Elliot often in those months. He came to the house on one pretext or another, to bring a book for her mother or a message for her father, and he always stayed longer than his errand required. Her mother was delighted; her father was indifferent; and Anne herself did not know what she felt, except that the days on which he did not come were longer than the others.

In December he asked her to marry him. He did it badly, standing by the fire with his back to her and speaking very fast, as if he were afraid of being interrupted. He said that he had nothing to offer but himself, that he knew how little that was worth, and that he would understand perfectly if she refused.

She did not refuse. She told him, when he had finished, that she did not care for fortune and never had; that she cared only whether a man was honest and would be kind; and that she believed he was both, or could be. He turned round then, and she saw that he had not expected it.

They were married in the spring, very quietly, in the little church by the mill. Her mother cried a great deal and was very happy. Her father shook the Captain by the hand and said that he hoped he would be steady. And the neighbourhood, which had agreed the summer before that Captain Elliot was the most agreeable man in the world, now agreed with equal confidence that he was the luckiest.
)";

const std::array<std::string_view, 24> kNames = {
    "Anne", "Mary", "Elizabeth", "Jane", "Catherine", "Harriet", "Emma", "Fanny",
    "Edmund", "Henry", "Frederick", "Charles", "William", "Edward", "George", "Thomas",
    "Mrs Bennet", "Mr Collins", "Lady Russell", "Mr Knightley", "Miss Bates", "Colonel Brandon",
    "Captain Harville", "Sir Walter"};
const std::array<std::string_view, 20> kAdjectives = {
    "agreeable", "sensible", "handsome", "tiresome", "amiable", "proud", "gentle", "lively",
    "quiet", "clever", "foolish", "generous", "cheerful", "anxious", "patient", "elegant",
    "honest", "modest", "silly", "grave"};
const std::array<std::string_view, 20> kNouns = {
    "letter", "garden", "carriage", "house", "ball", "dinner", "window", "road",
    "parlour", "village", "church", "fortune", "visit", "promise", "secret", "book",
    "morning", "evening", "fire", "walk"};
const std::array<std::string_view, 20> kVerbsPast = {
    "admired", "avoided", "received", "remembered", "described", "praised", "visited", "opened",
    "answered", "watched", "forgot", "noticed", "mentioned", "left", "found", "accepted",
    "refused", "imagined", "wanted", "closed"};
const std::array<std::string_view, 12> kAdverbs = {
    "quietly", "warmly", "coldly", "eagerly", "rather", "very", "hardly", "certainly",
    "gladly", "slowly", "suddenly", "often"};
const std::array<std::string_view, 10> kPlaces = {"Bath", "London", "Kellynch", "Highbury", "Longbourn",
                                                  "Mansfield", "Pemberley", "Netherfield", "Hartfield", "Uppercross"};
const std::array<std::string_view, 8> kFeelings = {"pleased", "surprised", "mortified", "delighted",
                                                   "uneasy", "ashamed", "content", "astonished"};

template <typename A>
std::string_view pick(const A& a, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> u(0, a.size() - 1);
    return a[u(rng)];
}

std::string capitalize(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

std::string sentence(std::mt19937_64& rng) {
    std::ostringstream o;
    std::uniform_int_distribution<int> form(0, 7);
    switch (form(rng)) {
        case 0:
            o << pick(kNames, rng) << " " << pick(kVerbsPast, rng) << " the " << pick(kAdjectives, rng) << " "
              << pick(kNouns, rng) << ".";
            break;
        case 1:
            o << "The " << pick(kNouns, rng) << " at " << pick(kPlaces, rng) << " was " << pick(kAdverbs, rng) << " "
              << pick(kAdjectives, rng) << ".";
            break;
        case 2:
            o << pick(kNames, rng) << " was " << pick(kFeelings, rng) << " to hear that " << pick(kNames, rng)
              << " had " << pick(kVerbsPast, rng) << " the " << pick(kNouns, rng) << ".";
            break;
        case 3:
            o << "\"I am " << pick(kFeelings, rng) << ",\" said " << pick(kNames, rng) << ", \"that the "
              << pick(kNouns, rng) << " is so " << pick(kAdjectives, rng) << ".\"";
            break;
        case 4:
            o << "In the " << pick(kNouns, rng) << " " << pick(kNames, rng) << " " << pick(kAdverbs, rng) << " "
              << pick(kVerbsPast, rng) << " a " << pick(kNouns, rng) << " from " << pick(kPlaces, rng) << ".";
            break;
        case 5:
            o << capitalize(std::string(pick(kAdverbs, rng))) << " " << pick(kNames, rng) << " thought the "
              << pick(kNouns, rng) << " " << pick(kAdjectives, rng) << ", and said so.";
            break;
        case 6:
            o << "Nobody at " << pick(kPlaces, rng) << " " << pick(kVerbsPast, rng) << " " << pick(kNames, rng)
              << " more than " << pick(kNames, rng) << ".";
            break;
        default:
            o << "It was a " << pick(kAdjectives, rng) << " " << pick(kNouns, rng) << ", and "
              << pick(kNames, rng) << " was " << pick(kFeelings, rng) << ".";
            break;
    }
    return o.str();
}

}  // namespace

std::string_view prose_passage() { return kProse; }

std::string synthetic_english(std::size_t n_sentences, std::mt19937_64& rng) {
    std::string out;
    std::uniform_int_distribution<int> para(3, 7);
    int left = para(rng);
    for (std::size_t i = 0; i < n_sentences; ++i) {
        out += sentence(rng);
        if (--left == 0 || i + 1 == n_sentences) {
            out += "\n";
            left = para(rng);
        } else {
            out += " ";
        }
    }
    return out;
}

const std::vector<std::string>& grammar_lexicon() {
    static const std::vector<std::string> words = [] {
        // every sentence form with every slot value, split the same way as text
        std::set<std::string> s;
        std::string text;
        auto add_all = [&](const auto& a, std::string_view left, std::string_view right) {
            for (auto w : a) text += std::string(left) + std::string(w) + std::string(right) + " ";
        };
        add_all(kNames, "", "");
        add_all(kNames, "", ",");
        add_all(kNames, "", ".");
        add_all(kAdjectives, "", "");
        add_all(kAdjectives, "", ".");
        add_all(kAdjectives, "", ",");
        add_all(kAdjectives, "", ".\"");
        add_all(kNouns, "", "");
        add_all(kNouns, "", ".");
        add_all(kNouns, "", ",");
        add_all(kVerbsPast, "", "");
        add_all(kAdverbs, "", "");
        for (auto w : kAdverbs) text += capitalize(std::string(w)) + " ";
        add_all(kPlaces, "", "");
        add_all(kPlaces, "", ".");
        add_all(kFeelings, "", "");
        add_all(kFeelings, "", ".");
        add_all(kFeelings, "", ",\"");
        text += "the The at was to hear that had \"I am said \"that is so In a from thought and so. Nobody "
                "more than It ";
        for (const auto& p : split_pieces(text)) s.insert(p);
        return std::vector<std::string>(s.begin(), s.end());
    }();
    return words;
}

const std::vector<std::string>& copy_source_words() {
    static const std::vector<std::string> words = [] {
        std::mt19937_64 rng(20240611);
        std::string text = std::string(kProse) + "\n" + synthetic_english(4000, rng);
        std::vector<std::string> out;
        for (auto& p : split_pieces(text))
            if (p != kNewlineToken) out.push_back(p);
        return out;
    }();
    return words;
}

std::string vocab_corpus() {
    std::string out(kProse);
    out += "\n";
    for (const auto& w : grammar_lexicon()) out += w + " ";
    out += "\n";
    out += task_lexicon();
    return out;
}

std::string pretraining_corpus(std::size_t n_sentences, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::string out(kProse);
    out += "\n";
    out += synthetic_english(n_sentences, rng);
    // task-shaped lines so list and bit layouts are familiar before fine-tuning
    for (std::size_t i = 0; i < n_sentences / 8; ++i) {
        const auto task = kAllTasks[i % 4];
        const int phase = 1 + static_cast<int>((i / 4) % 2);
        auto inst = generate_task(task, phase, rng);
        out += inst.prompt + " " + inst.answer + "\n";
    }
    return out;
}

}  // namespace metatok
