// Corpus ingestion, the BIOES boundary codec and N-way K-shot episode sampling.

#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace bdcp {

/// Boundary classes of the BIOES scheme. The numeric value is the class index.
enum class Boundary : int { B = 0, I = 1, O = 2, E = 3, S = 4 };

inline constexpr int kNumBoundaryClasses = 5;

char boundary_letter(Boundary b);
Boundary boundary_from_letter(char c);

struct EntitySpan {
    int start = 0; // inclusive
    int end = 0;   // inclusive
    std::string type;

    friend bool operator==(const EntitySpan&, const EntitySpan&) = default;
    friend auto operator<=>(const EntitySpan&, const EntitySpan&) = default;
};

struct Sentence {
    std::vector<std::string> tokens;
    std::vector<EntitySpan> spans;

    int size() const { return static_cast<int>(tokens.size()); }
    /// BIOES labels derived from `spans`.
    std::vector<Boundary> boundary_labels() const;
    /// Throws InvariantError when the sentence is empty or spans overlap / leave [0, n).
    void validate() const;

    friend bool operator==(const Sentence&, const Sentence&) = default;
};

using Corpus = std::vector<Sentence>;

struct Episode {
    std::vector<Sentence> support;
    std::vector<Sentence> query;
    std::vector<std::string> types; // sorted, |types| = N
    std::uint64_t seed = 0;

    friend bool operator==(const Episode&, const Episode&) = default;
};

// ---- codec ----------------------------------------------------------------

/// S for single-token spans, B I* E for longer spans, O elsewhere.
/// Throws InvariantError on overlapping or out-of-range spans.
std::vector<Boundary> spans_to_bioes(const std::vector<std::pair<int, int>>& spans, int n);
std::vector<Boundary> spans_to_bioes(const std::vector<EntitySpan>& spans, int n);

/// Total inverse of spans_to_bioes. Each maximal run of non-O labels is split
/// into S / B I* E patterns when it parses as a sequence of them; otherwise the
/// whole run becomes one span. Output is sorted and non-overlapping.
std::vector<std::pair<int, int>> bioes_to_spans(const std::vector<Boundary>& labels);

// ---- column format ----------------------------------------------------------

/// Reads `token<TAB>label` lines with blank-line sentence separators. Labels are
/// `O` or an entity type; contiguous runs of one type form a span.
Corpus parse_corpus(std::string_view text);
Corpus read_corpus(std::istream& in);
void write_corpus(std::ostream& out, const Corpus& corpus);
std::string serialize_corpus(const Corpus& corpus);

/// CoNLL-style BIO reader (`token<TAB>B-TYPE` / `I-TYPE` / `O`), mapped onto
/// the same Sentence representation. Stray I- tags open a new span.
Corpus parse_conll_bio(std::string_view text);

// ---- episodes ---------------------------------------------------------------

/// Number of span instances per type across the corpus.
std::map<std::string, int> type_counts(const Corpus& corpus);

/// Greedy N-way K-shot sampler. Sentences are admitted while they help an
/// under-filled type and keep every type at or below 2K (2 K_query for the
/// query set), so per-type counts land in [K, 2K]. Deterministic in `seed`.
Episode sample_episode(const Corpus& corpus, int n_way, int k_shot, int k_query, std::uint64_t seed);

/// Throws InvariantError when an episode breaks the type-coverage contract.
void check_episode(const Episode& episode, int n_way, int k_shot);

nlohmann::json sentence_to_json(const Sentence& s);
Sentence sentence_from_json(const nlohmann::json& j);
nlohmann::json episode_to_json(const Episode& e);
Episode episode_from_json(const nlohmann::json& j);

std::vector<Episode> read_episodes(std::istream& in);
void write_episodes(std::ostream& out, const std::vector<Episode>& episodes);

} // namespace bdcp
