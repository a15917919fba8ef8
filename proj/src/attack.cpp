#include "bdcp/attack.hpp"

#include "bdcp/encoder.hpp"
#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace bdcp {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool has_alpha(std::string_view s) {
    return std::any_of(s.begin(), s.end(), [](char c) { return std::isalpha(static_cast<unsigned char>(c)); });
}

std::vector<EntitySpan> sorted_spans(std::vector<EntitySpan> spans) {
    std::sort(spans.begin(), spans.end());
    return spans;
}

} // namespace

std::string restore_case(std::string_view original, std::string_view replacement) {
    std::string out(replacement);
    if (!has_alpha(original)) return out;
    const bool all_upper = std::none_of(original.begin(), original.end(),
                                        [](char c) { return std::islower(static_cast<unsigned char>(c)); });
    if (all_upper && original.size() > 1) {
        for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    } else if (std::isupper(static_cast<unsigned char>(original.front())) && !out.empty()) {
        out.front() = static_cast<char>(std::toupper(static_cast<unsigned char>(out.front())));
    }
    return out;
}

void SynonymLexicon::add(std::string_view word, const std::vector<std::string>& synonyms) {
    const std::string key = lower(word);
    auto& list = entries_[key];
    for (const auto& s : synonyms) {
        if (s.empty() || lower(s) == key) continue;
        if (std::find(list.begin(), list.end(), s) == list.end()) list.push_back(s);
    }
    if (list.empty()) entries_.erase(key);
}

std::vector<std::string> SynonymLexicon::candidates(std::string_view word) const {
    auto it = entries_.find(lower(word));
    if (it == entries_.end()) return {};
    std::vector<std::string> out;
    out.reserve(it->second.size());
    for (const auto& s : it->second) {
        std::string c = restore_case(word, s);
        if (c != word) out.push_back(std::move(c));
    }
    return out;
}

SynonymLexicon parse_lexicon(std::string_view text) {
    SynonymLexicon lex;
    std::istringstream in{std::string(text)};
    std::string line;
    size_t ln = 0;
    while (std::getline(in, line)) {
        ++ln;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos || tab == 0) throw ParseError(ln, "expected word<TAB>synonyms");
        std::vector<std::string> syns;
        std::string rest = line.substr(tab + 1), item;
        std::istringstream items(rest);
        while (std::getline(items, item, ','))
            if (!item.empty()) syns.push_back(item);
        lex.add(line.substr(0, tab), syns);
    }
    return lex;
}

SynonymLexicon read_lexicon(std::istream& in) {
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_lexicon(buf.str());
}

std::string serialize_lexicon(const SynonymLexicon& lexicon) {
    std::ostringstream out;
    for (const auto& [word, syns] : lexicon.entries()) {
        out << word << '\t';
        for (size_t i = 0; i < syns.size(); ++i) out << (i ? "," : "") << syns[i];
        out << '\n';
    }
    return out.str();
}

int substitution_budget(double rho, int n) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("attack budget rho must lie in [0, 1]");
    return static_cast<int>(std::ceil(rho * n - 1e-9));
}

std::vector<std::pair<int, double>> rank_importance(const VictimInterface& victim, const Sentence& sentence) {
    const double base = victim.loss(sentence);
    std::vector<std::pair<int, double>> scores;
    scores.reserve(sentence.tokens.size());
    Sentence masked = sentence;
    for (int i = 0; i < sentence.size(); ++i) {
        masked.tokens[static_cast<size_t>(i)] = std::string(Vocabulary::kMaskToken);
        scores.emplace_back(i, victim.loss(masked) - base);
        masked.tokens[static_cast<size_t>(i)] = sentence.tokens[static_cast<size_t>(i)];
    }
    std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return scores;
}

AdversarialSentence attack_sentence(const VictimInterface& victim, const Sentence& sentence,
                                    const CandidateSource& candidates, double rho, std::uint64_t seed) {
    const int budget = substitution_budget(rho, sentence.size());
    AdversarialSentence out;
    out.original = sentence;
    out.perturbed = sentence;
    out.seed = seed;
    const auto gold = sorted_spans(sentence.spans);
    auto fooled = [&](const Sentence& s) { return sorted_spans(victim.predict(s.tokens)) != gold; };

    out.success = fooled(sentence);
    if (out.success || budget == 0) return out;

    Sentence& cur = out.perturbed;
    double cur_loss = victim.loss(cur);
    for (const auto& [pos, score] : rank_importance(victim, sentence)) {
        if (static_cast<int>(out.substitutions.size()) >= budget) break;
        const std::string original_word = cur.tokens[static_cast<size_t>(pos)];
        std::string best;
        double best_loss = cur_loss;
        for (const auto& cand : candidates.candidates(original_word)) {
            if (cand == original_word) continue;
            cur.tokens[static_cast<size_t>(pos)] = cand;
            const double l = victim.loss(cur);
            if (l > best_loss) {
                best_loss = l;
                best = cand;
            }
        }
        cur.tokens[static_cast<size_t>(pos)] = best.empty() ? original_word : best;
        if (best.empty()) continue;
        out.substitutions.push_back({pos, original_word, best});
        cur_loss = best_loss;
        if (fooled(cur)) {
            out.success = true;
            return out;
        }
    }
    out.success = fooled(cur);
    return out;
}

std::vector<AdversarialSentence> attack_corpus(const VictimInterface& victim, const Corpus& corpus,
                                               const CandidateSource& candidates, double rho, std::uint64_t seed) {
    (void)substitution_budget(rho, 0);
    std::vector<AdversarialSentence> out;
    out.reserve(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
        try {
            out.push_back(attack_sentence(victim, corpus[i], candidates, rho, s));
        } catch (const std::exception& ex) {
            AdversarialSentence failed;
            failed.original = corpus[i];
            failed.perturbed = corpus[i];
            failed.seed = s;
            failed.error = ex.what();
            out.push_back(std::move(failed));
        }
    }
    return out;
}

nlohmann::json adversarial_to_json(const AdversarialSentence& a) {
    nlohmann::json subs = nlohmann::json::array();
    for (const auto& s : a.substitutions) subs.push_back({{"position", s.position}, {"old", s.old_word}, {"new", s.new_word}});
    nlohmann::json j = {{"original_tokens", a.original.tokens},
                        {"perturbed_tokens", a.perturbed.tokens},
                        {"substitutions", subs},
                        {"success", a.success},
                        {"seed", a.seed}};
    if (!a.error.empty()) j["error"] = a.error;
    return j;
}

} // namespace bdcp
