// Procedural toy data: a patterned multi-type corpus and a matching synonym
// lexicon, for desk-scale training and attack experiments.

#pragma once

#include "bdcp/attack.hpp"
#include "bdcp/corpus.hpp"
#include "bdcp/encoder.hpp"

#include <cstdint>

namespace bdcp {

struct SyntheticConfig {
    int types = 10;
    int words_per_type = 8;  // size of each per-type word pool
    int fillers = 30;
    int sentences = 400;
    int max_mentions = 2;     // 1..max_mentions typed mentions per sentence
    int max_filler_run = 3;   // fillers before, between and after mentions
    double two_word_rate = 0.3; // share of two-token entity mentions
    int synonyms = 2;         // lexicon entries per word
    std::uint64_t seed = 7;
};

/// Type names are `type0`, `type1`, ...; type i is introduced by trigger
/// `trig<i>`. One-word mentions use `ent<i>_<k>`, two-word mentions
/// `pre<i>_<k> post<i>_<j>`. Sentences follow `filler* (trigger entity filler*)+`.
Corpus synthetic_corpus(const SyntheticConfig& config);

/// Fillers map to other fillers and unseen variants; triggers and entity words
/// map to unseen variants only.
SynonymLexicon synthetic_lexicon(const SyntheticConfig& config);

/// Every distinct token of the corpus, in first-seen order.
Vocabulary corpus_vocabulary(const Corpus& corpus);

} // namespace bdcp
