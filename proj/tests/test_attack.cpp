#include "bdcp/attack.hpp"
#include "bdcp/encoder.hpp"
#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"

#include <doctest.h>

#include <map>
#include <random>

using namespace bdcp;

namespace {

// Loss and prediction ignore the tokens entirely.
struct BlindVictim : VictimInterface {
    std::vector<EntitySpan> answer;
    double loss(const Sentence&) const override { return 1.0; }
    std::vector<EntitySpan> predict(const std::vector<std::string>&) const override { return answer; }
};

// Per-word weights summed over the sentence; predicts one span per known
// entity word. Deterministic and cheap to recompute by hand.
struct WeightVictim : VictimInterface {
    std::map<std::string, double> weight;
    std::map<std::string, std::string> entity; // word -> type
    double loss(const Sentence& s) const override {
        double l = 0.0;
        for (const auto& t : s.tokens) {
            auto it = weight.find(t);
            l += it == weight.end() ? 0.5 : it->second;
        }
        return l;
    }
    std::vector<EntitySpan> predict(const std::vector<std::string>& tokens) const override {
        std::vector<EntitySpan> out;
        for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
            auto it = entity.find(tokens[static_cast<size_t>(i)]);
            if (it != entity.end()) out.push_back({i, i, it->second});
        }
        return out;
    }
};

struct ThrowingVictim : VictimInterface {
    double loss(const Sentence& s) const override {
        if (s.tokens.front() == "boom") throw NumericalError("victim exploded");
        return 0.0;
    }
    std::vector<EntitySpan> predict(const std::vector<std::string>&) const override { return {}; }
};

// Words w0..w9; entities e0..e4 of type T<k>; every word has two synonyms.
struct RandomWorld {
    WeightVictim victim;
    SynonymLexicon lexicon;
    std::mt19937_64 rng;

    explicit RandomWorld(std::uint64_t seed) : rng(seed) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (int k = 0; k < 10; ++k) {
            const std::string w = "w" + std::to_string(k);
            victim.weight[w] = u(rng);
            lexicon.add(w, {w + "a", w + "b"});
            victim.weight[w + "a"] = u(rng);
            victim.weight[w + "b"] = u(rng);
        }
        for (int k = 0; k < 5; ++k) {
            const std::string e = "e" + std::to_string(k);
            victim.entity[e] = "T" + std::to_string(k);
            victim.weight[e] = u(rng);
            lexicon.add(e, {e + "x"});
            victim.weight[e + "x"] = u(rng) + 0.5;
        }
    }

    Sentence sentence() {
        const int n = std::uniform_int_distribution<int>(1, 12)(rng);
        Sentence s;
        for (int i = 0; i < n; ++i) {
            if (std::bernoulli_distribution(0.25)(rng)) {
                const int k = std::uniform_int_distribution<int>(0, 4)(rng);
                s.tokens.push_back("e" + std::to_string(k));
                s.spans.push_back({i, i, "T" + std::to_string(k)});
            } else {
                s.tokens.push_back("w" + std::to_string(std::uniform_int_distribution<int>(0, 9)(rng)));
            }
        }
        return s;
    }
};

} // namespace

TEST_CASE("lexicon") {
    const SynonymLexicon lex = parse_lexicon("Big\tlarge,huge,big\nsmall\tlittle\n\n");
    CHECK(lex.size() == 2);
    CHECK(lex.candidates("big") == std::vector<std::string>{"large", "huge"});
    CHECK(lex.candidates("Big") == std::vector<std::string>{"Large", "Huge"});
    CHECK(lex.candidates("BIG") == std::vector<std::string>{"LARGE", "HUGE"});
    CHECK(lex.candidates("tiny").empty());
    CHECK(parse_lexicon(serialize_lexicon(lex)).entries() == lex.entries());
    CHECK_THROWS_AS(parse_lexicon("no tab here\n"), ParseError);
    CHECK(restore_case("Paris", "rome") == "Rome");
    CHECK(restore_case("123", "abc") == "abc");
}

TEST_CASE("rank_importance") {
    BlindVictim blind;
    const Sentence s{{"a", "b", "c"}, {}};
    const auto r = rank_importance(blind, s);
    REQUIRE(r.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(r[static_cast<size_t>(i)].first == i);
        CHECK(r[static_cast<size_t>(i)].second == 0.0);
    }
    CHECK(rank_importance(blind, Sentence{{"x"}, {}}).size() == 1);

    WeightVictim v;
    v.weight = {{"a", 0.1}, {"b", 2.0}, {"c", 0.5}, {"d", 0.9}, {std::string(Vocabulary::kMaskToken), 1.0}};
    const Sentence four{{"a", "b", "c", "d"}, {}};
    std::vector<std::pair<int, double>> expect;
    for (int i = 0; i < 4; ++i) {
        Sentence masked = four;
        masked.tokens[static_cast<size_t>(i)] = std::string(Vocabulary::kMaskToken);
        expect.emplace_back(i, v.loss(masked) - v.loss(four));
    }
    std::stable_sort(expect.begin(), expect.end(), [](auto& x, auto& y) { return x.second > y.second; });
    const auto got = rank_importance(v, four);
    REQUIRE(got.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(got[i].first == expect[i].first);
        CHECK(got[i].second == doctest::Approx(expect[i].second));
    }
    CHECK(got.front().first == 0); // masking the cheapest word raises the loss most
    CHECK(got.back().first == 1);  // masking the expensive word lowers it
}

TEST_CASE("attack_sentence") {
    WeightVictim v;
    v.entity = {{"Paris", "LOC"}};
    v.weight = {{"Paris", 0.0}, {"Parigi", 1.0}, {"in", 0.2}, {"within", 0.1}};
    SynonymLexicon lex;
    lex.add("paris", {"Parigi"});
    lex.add("in", {"within"});
    const Sentence s{{"in", "Paris"}, {{1, 1, "LOC"}}};

    SUBCASE("zero budget") {
        const auto a = attack_sentence(v, s, lex, 0.0, 5);
        CHECK(a.perturbed == s);
        CHECK(a.substitutions.empty());
        CHECK_FALSE(a.success);
        CHECK(a.seed == 5);
    }
    SUBCASE("empty lexicon") {
        const auto a = attack_sentence(v, s, SynonymLexicon{}, 1.0, 1);
        CHECK(a.perturbed == s);
        CHECK_FALSE(a.success);
        const Sentence wrong{{"in", "Paris"}, {{0, 1, "LOC"}}};
        CHECK(attack_sentence(v, wrong, SynonymLexicon{}, 1.0, 1).success);
    }
    SUBCASE("one trigger substitution flips the prediction") {
        const auto a = attack_sentence(v, s, lex, 0.5, 2);
        CHECK(a.success);
        REQUIRE(a.substitutions.size() == 1);
        CHECK(a.substitutions[0] == Substitution{1, "Paris", "Parigi"});
        CHECK(a.perturbed.spans == s.spans);
        CHECK(a.perturbed.tokens == std::vector<std::string>{"in", "Parigi"});
    }
    SUBCASE("candidates that lower the loss are rejected") {
        const auto a = attack_sentence(v, Sentence{{"in"}, {}}, lex, 1.0, 3);
        CHECK(a.substitutions.empty());
    }
    CHECK_THROWS_AS(attack_sentence(v, s, lex, 1.5, 0), ConfigError);
}

TEST_CASE("attack_corpus composes sentence attacks") {
    RandomWorld w(1);
    CHECK(attack_corpus(w.victim, {}, w.lexicon, 0.4, 1).empty());
    const Corpus c = {w.sentence(), w.sentence()};
    const auto all = attack_corpus(w.victim, c, w.lexicon, 0.4, 77);
    REQUIRE(all.size() == 2);
    for (size_t i = 0; i < 2; ++i)
        CHECK(all[i] == attack_sentence(w.victim, c[i], w.lexicon, 0.4, derive_seed(77, static_cast<std::uint64_t>(i))));

    ThrowingVictim t;
    const auto mixed = attack_corpus(t, {{{"boom"}, {}}, {{"fine"}, {}}}, w.lexicon, 0.4, 1);
    REQUIRE(mixed.size() == 2);
    CHECK_FALSE(mixed[0].error.empty());
    CHECK(mixed[1].error.empty());
}

TEST_CASE("attack properties on random sentences") {
    RandomWorld w(9);
    Corpus corpus;
    for (int i = 0; i < 300; ++i) corpus.push_back(w.sentence());
    for (double rho : {0.0, 0.2, 0.4, 1.0}) {
        const auto out = attack_corpus(w.victim, corpus, w.lexicon, rho, 3);
        CHECK(out == attack_corpus(w.victim, corpus, w.lexicon, rho, 3));
        for (const auto& a : out) {
            REQUIRE(a.perturbed.spans == a.original.spans);
            REQUIRE(static_cast<int>(a.substitutions.size()) <= substitution_budget(rho, a.original.size()));
            Sentence replay = a.original;
            double loss = w.victim.loss(replay);
            int differing = 0;
            for (size_t i = 0; i < replay.tokens.size(); ++i) differing += a.original.tokens[i] != a.perturbed.tokens[i];
            CHECK(differing == static_cast<int>(a.substitutions.size()));
            for (const auto& sub : a.substitutions) {
                REQUIRE(replay.tokens[static_cast<size_t>(sub.position)] == sub.old_word);
                replay.tokens[static_cast<size_t>(sub.position)] = sub.new_word;
                const double next = w.victim.loss(replay);
                CHECK(next > loss);
                loss = next;
            }
            CHECK(replay.tokens == a.perturbed.tokens);
        }
    }
}
