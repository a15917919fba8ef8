#include "bdcp/synthetic.hpp"

#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"

#include <algorithm>
#include <random>
#include <unordered_set>

namespace bdcp {

namespace {

std::string type_name(int t) { return "type" + std::to_string(t); }
std::string trigger(int t) { return "trig" + std::to_string(t); }
std::string entity_word(int t, int k) { return "ent" + std::to_string(t) + "_" + std::to_string(k); }
std::string head_word(int t, int k) { return "pre" + std::to_string(t) + "_" + std::to_string(k); }
std::string tail_word(int t, int k) { return "post" + std::to_string(t) + "_" + std::to_string(k); }
std::string filler(int k) { return "fill" + std::to_string(k); }

int uniform(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

void validate(const SyntheticConfig& c) {
    if (c.types < 1 || c.words_per_type < 1 || c.fillers < 1 || c.sentences < 0 || c.max_mentions < 1 ||
        c.max_filler_run < 0 || c.synonyms < 0 || !(c.two_word_rate >= 0.0 && c.two_word_rate <= 1.0))
        throw ConfigError("invalid synthetic corpus configuration");
    if (c.max_mentions > c.types) throw ConfigError("more mentions per sentence than types");
}

} // namespace

Corpus synthetic_corpus(const SyntheticConfig& config) {
    validate(config);
    std::mt19937_64 rng(derive_seed(config.seed, "synthetic.corpus"));
    Corpus corpus;
    corpus.reserve(static_cast<size_t>(config.sentences));
    auto fillers = [&](Sentence& s) {
        for (int i = uniform(rng, 0, config.max_filler_run); i > 0; --i)
            s.tokens.push_back(filler(uniform(rng, 0, config.fillers - 1)));
    };
    for (int n = 0; n < config.sentences; ++n) {
        Sentence s;
        const int mentions = uniform(rng, 1, config.max_mentions);
        std::vector<int> used;
        fillers(s);
        for (int m = 0; m < mentions; ++m) {
            int t = 0;
            do t = uniform(rng, 0, config.types - 1);
            while (std::find(used.begin(), used.end(), t) != used.end());
            used.push_back(t);
            if (m > 0 && s.tokens.empty() == false && config.max_filler_run > 0)
                s.tokens.push_back(filler(uniform(rng, 0, config.fillers - 1)));
            s.tokens.push_back(trigger(t));
            const int start = s.size();
            const int len = std::bernoulli_distribution(config.two_word_rate)(rng) ? 2 : 1;
            const int last = config.words_per_type - 1;
            if (len == 1) {
                s.tokens.push_back(entity_word(t, uniform(rng, 0, last)));
            } else {
                s.tokens.push_back(head_word(t, uniform(rng, 0, last)));
                s.tokens.push_back(tail_word(t, uniform(rng, 0, last)));
            }
            s.spans.push_back({start, start + len - 1, type_name(t)});
            fillers(s);
        }
        s.validate();
        corpus.push_back(std::move(s));
    }
    return corpus;
}

SynonymLexicon synthetic_lexicon(const SyntheticConfig& config) {
    validate(config);
    std::mt19937_64 rng(derive_seed(config.seed, "synthetic.lexicon"));
    SynonymLexicon lex;
    auto variants = [&](const std::string& w, int count) {
        std::vector<std::string> out;
        for (int i = 0; i < count; ++i) out.push_back(w + "v" + std::to_string(i));
        return out;
    };
    for (int k = 0; k < config.fillers; ++k) {
        std::vector<std::string> syns;
        if (config.synonyms > 0 && config.fillers > 1) {
            int other = uniform(rng, 0, config.fillers - 2);
            if (other >= k) ++other;
            syns.push_back(filler(other));
        }
        for (auto& v : variants(filler(k), config.synonyms - static_cast<int>(syns.size()))) syns.push_back(v);
        lex.add(filler(k), syns);
    }
    for (int t = 0; t < config.types; ++t) {
        lex.add(trigger(t), variants(trigger(t), config.synonyms));
        for (int k = 0; k < config.words_per_type; ++k)
            for (const auto& w : {entity_word(t, k), head_word(t, k), tail_word(t, k)})
                lex.add(w, variants(w, config.synonyms));
    }
    return lex;
}

Vocabulary corpus_vocabulary(const Corpus& corpus) {
    std::vector<std::string> words;
    std::unordered_set<std::string> seen;
    for (const auto& s : corpus)
        for (const auto& t : s.tokens)
            if (seen.insert(t).second) words.push_back(t);
    return Vocabulary(words);
}

} // namespace bdcp
