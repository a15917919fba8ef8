// Label-preserving synonym-substitution attack against a few-shot NER victim.

#pragma once

#include "bdcp/corpus.hpp"

#include <cstdint>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace bdcp {

/// What the attack needs from a model: its training loss on gold annotations
/// and its predicted (span, type) set. Implementations must be usable
/// concurrently for reads.
class VictimInterface {
public:
    virtual ~VictimInterface() = default;
    virtual double loss(const Sentence& sentence) const = 0;
    virtual std::vector<EntitySpan> predict(const std::vector<std::string>& tokens) const = 0;
};

/// Substitute words for one position. Returned words must differ from the input.
class CandidateSource {
public:
    virtual ~CandidateSource() = default;
    virtual std::vector<std::string> candidates(std::string_view word) const = 0;
};

/// Applies the letter case of `original` (all-upper, capitalised or as-is) to `replacement`.
std::string restore_case(std::string_view original, std::string_view replacement);

class SynonymLexicon : public CandidateSource {
public:
    /// Keys are case-folded; candidates equal to their key (ignoring case) are dropped.
    void add(std::string_view word, const std::vector<std::string>& synonyms);
    std::vector<std::string> candidates(std::string_view word) const override;

    bool empty() const { return entries_.empty(); }
    size_t size() const { return entries_.size(); }
    const std::map<std::string, std::vector<std::string>>& entries() const { return entries_; }

private:
    std::map<std::string, std::vector<std::string>> entries_;
};

/// `word<TAB>syn1,syn2,...` per line; blank lines are skipped.
SynonymLexicon parse_lexicon(std::string_view text);
SynonymLexicon read_lexicon(std::istream& in);
std::string serialize_lexicon(const SynonymLexicon& lexicon);

struct Substitution {
    int position = 0;
    std::string old_word;
    std::string new_word;

    friend bool operator==(const Substitution&, const Substitution&) = default;
};

struct AdversarialSentence {
    Sentence original;
    Sentence perturbed;
    std::vector<Substitution> substitutions;
    bool success = false;
    std::uint64_t seed = 0;
    std::string error; // non-empty when the victim failed on this sentence

    friend bool operator==(const AdversarialSentence&, const AdversarialSentence&) = default;
};

/// Word budget ceil(rho * n).
int substitution_budget(double rho, int n);

/// score(i) = loss(sentence with token i masked) - loss(sentence), sorted by
/// descending score with ties broken by ascending position.
std::vector<std::pair<int, double>> rank_importance(const VictimInterface& victim, const Sentence& sentence);

/// Greedy importance-ordered substitution. Stops as soon as the victim's
/// predicted (span, type) set differs from gold or the budget is spent.
/// `seed` is recorded in the result; the search itself is deterministic.
AdversarialSentence attack_sentence(const VictimInterface& victim, const Sentence& sentence,
                                    const CandidateSource& candidates, double rho, std::uint64_t seed);

/// Per-sentence attack with derived seeds; victim failures are recorded on the
/// affected entry (identity perturbation) instead of aborting.
std::vector<AdversarialSentence> attack_corpus(const VictimInterface& victim, const Corpus& corpus,
                                               const CandidateSource& candidates, double rho, std::uint64_t seed);

nlohmann::json adversarial_to_json(const AdversarialSentence& a);

} // namespace bdcp
