#include "bdcp/corpus.hpp"

#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

namespace bdcp {

char boundary_letter(Boundary b) {
    static constexpr char letters[] = {'B', 'I', 'O', 'E', 'S'};
    return letters[static_cast<int>(b)];
}

Boundary boundary_from_letter(char c) {
    switch (c) {
    case 'B': return Boundary::B;
    case 'I': return Boundary::I;
    case 'O': return Boundary::O;
    case 'E': return Boundary::E;
    case 'S': return Boundary::S;
    default: throw InvariantError(std::string("unknown boundary letter '") + c + "'");
    }
}

std::vector<Boundary> spans_to_bioes(const std::vector<std::pair<int, int>>& spans, int n) {
    if (n < 0) throw InvariantError("negative sentence length");
    std::vector<Boundary> labels(static_cast<size_t>(n), Boundary::O);
    std::vector<bool> covered(static_cast<size_t>(n), false);
    for (auto [start, end] : spans) {
        if (start < 0 || end < start || end >= n)
            throw InvariantError("span (" + std::to_string(start) + "," + std::to_string(end) +
                                 ") outside [0," + std::to_string(n) + ")");
        for (int i = start; i <= end; ++i) {
            if (covered[static_cast<size_t>(i)])
                throw InvariantError("overlapping spans at token " + std::to_string(i));
            covered[static_cast<size_t>(i)] = true;
        }
        if (start == end) {
            labels[static_cast<size_t>(start)] = Boundary::S;
        } else {
            labels[static_cast<size_t>(start)] = Boundary::B;
            for (int i = start + 1; i < end; ++i) labels[static_cast<size_t>(i)] = Boundary::I;
            labels[static_cast<size_t>(end)] = Boundary::E;
        }
    }
    return labels;
}

std::vector<Boundary> spans_to_bioes(const std::vector<EntitySpan>& spans, int n) {
    std::vector<std::pair<int, int>> plain;
    plain.reserve(spans.size());
    for (const auto& s : spans) plain.emplace_back(s.start, s.end);
    return spans_to_bioes(plain, n);
}

namespace {

// Splits labels[begin, end) (all non-O) into S / B I* E patterns. Returns false
// when the run is not a concatenation of valid patterns.
bool split_run(const std::vector<Boundary>& labels, int begin, int end, std::vector<std::pair<int, int>>& out) {
    std::vector<std::pair<int, int>> parts;
    int i = begin;
    while (i < end) {
        const Boundary b = labels[static_cast<size_t>(i)];
        if (b == Boundary::S) {
            parts.emplace_back(i, i);
            ++i;
        } else if (b == Boundary::B) {
            int j = i + 1;
            while (j < end && labels[static_cast<size_t>(j)] == Boundary::I) ++j;
            if (j >= end || labels[static_cast<size_t>(j)] != Boundary::E) return false;
            parts.emplace_back(i, j);
            i = j + 1;
        } else {
            return false;
        }
    }
    out.insert(out.end(), parts.begin(), parts.end());
    return true;
}

} // namespace

std::vector<std::pair<int, int>> bioes_to_spans(const std::vector<Boundary>& labels) {
    std::vector<std::pair<int, int>> spans;
    const int n = static_cast<int>(labels.size());
    int i = 0;
    while (i < n) {
        if (labels[static_cast<size_t>(i)] == Boundary::O) {
            ++i;
            continue;
        }
        int j = i;
        while (j < n && labels[static_cast<size_t>(j)] != Boundary::O) ++j;
        if (!split_run(labels, i, j, spans)) spans.emplace_back(i, j - 1);
        i = j;
    }
    return spans;
}

std::vector<Boundary> Sentence::boundary_labels() const { return spans_to_bioes(spans, size()); }

void Sentence::validate() const {
    if (tokens.empty()) throw InvariantError("sentence has no tokens");
    (void)spans_to_bioes(spans, size());
    for (const auto& s : spans)
        if (s.type.empty()) throw InvariantError("span with empty type");
}

// ---- column format ----------------------------------------------------------

namespace {

struct SentenceBuilder {
    Sentence current;
    std::vector<std::string> labels;

    bool empty() const { return current.tokens.empty(); }

    Sentence finish() {
        Sentence s = std::move(current);
        current = {};
        return s;
    }
};

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        lines.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    return lines;
}

template <class OnLabel>
Corpus parse_columns(std::string_view text, OnLabel on_label) {
    Corpus corpus;
    Sentence current;
    std::string open_type; // type of the currently open span, empty if none
    auto flush = [&]() {
        if (!current.tokens.empty()) corpus.push_back(std::move(current));
        current = {};
        open_type.clear();
    };
    const auto lines = split_lines(text);
    for (size_t ln = 0; ln < lines.size(); ++ln) {
        std::string_view line = lines[ln];
        if (line.empty()) {
            flush();
            continue;
        }
        const size_t tab = line.find('\t');
        if (tab == std::string_view::npos || line.find('\t', tab + 1) != std::string_view::npos)
            throw ParseError(ln + 1, "expected exactly two tab-separated columns");
        std::string_view token = line.substr(0, tab);
        std::string_view label = line.substr(tab + 1);
        if (token.empty() || label.empty()) throw ParseError(ln + 1, "empty token or label");
        const int pos = current.size();
        current.tokens.emplace_back(token);
        on_label(ln + 1, label, pos, current, open_type);
    }
    flush();
    return corpus;
}

} // namespace

Corpus parse_corpus(std::string_view text) {
    return parse_columns(text, [](size_t, std::string_view label, int pos, Sentence& s, std::string& open) {
        if (label == "O") {
            open.clear();
            return;
        }
        if (!open.empty() && open == label && !s.spans.empty() && s.spans.back().end == pos - 1) {
            s.spans.back().end = pos;
        } else {
            s.spans.push_back({pos, pos, std::string(label)});
            open = std::string(label);
        }
    });
}

Corpus read_corpus(std::istream& in) {
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_corpus(buf.str());
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
    for (const auto& s : corpus) {
        std::vector<const std::string*> labels(s.tokens.size(), nullptr);
        for (const auto& span : s.spans)
            for (int i = span.start; i <= span.end; ++i) labels[static_cast<size_t>(i)] = &span.type;
        for (size_t i = 0; i < s.tokens.size(); ++i)
            out << s.tokens[i] << '\t' << (labels[i] ? *labels[i] : std::string("O")) << '\n';
        out << '\n';
    }
}

std::string serialize_corpus(const Corpus& corpus) {
    std::ostringstream out;
    write_corpus(out, corpus);
    return out.str();
}

Corpus parse_conll_bio(std::string_view text) {
    return parse_columns(text, [](size_t line, std::string_view label, int pos, Sentence& s, std::string& open) {
        if (label == "O") {
            open.clear();
            return;
        }
        if (label.size() < 3 || label[1] != '-' || (label[0] != 'B' && label[0] != 'I'))
            throw ParseError(line, "expected O, B-TYPE or I-TYPE");
        std::string type(label.substr(2));
        if (label[0] == 'I' && open == type && !s.spans.empty() && s.spans.back().end == pos - 1) {
            s.spans.back().end = pos;
        } else {
            s.spans.push_back({pos, pos, type});
            open = type;
        }
    });
}

// ---- episodes ---------------------------------------------------------------

std::map<std::string, int> type_counts(const Corpus& corpus) {
    std::map<std::string, int> counts;
    for (const auto& s : corpus)
        for (const auto& span : s.spans) ++counts[span.type];
    return counts;
}

namespace {

struct GreedyFill {
    std::map<std::string, int> counts;
    std::vector<size_t> chosen;
};

// Few-NERD style greedy fill over `order`, skipping indices in `used`.
GreedyFill greedy_fill(const Corpus& corpus, const std::vector<size_t>& order, const std::vector<bool>& used,
                       const std::vector<std::string>& types, int k) {
    GreedyFill fill;
    for (const auto& t : types) fill.counts[t] = 0;
    auto done = [&]() {
        return std::all_of(fill.counts.begin(), fill.counts.end(), [k](const auto& kv) { return kv.second >= k; });
    };
    for (size_t idx : order) {
        if (done()) break;
        if (used[idx]) continue;
        const Sentence& s = corpus[idx];
        std::map<std::string, int> local;
        for (const auto& span : s.spans) ++local[span.type];
        bool helps = false, fits = true;
        for (const auto& [type, c] : local) {
            const int have = fill.counts.at(type);
            if (have < k) helps = true;
            if (have + c > 2 * k) fits = false;
        }
        if (!helps || !fits) continue;
        for (const auto& [type, c] : local) fill.counts[type] += c;
        fill.chosen.push_back(idx);
    }
    return fill;
}

std::string first_deficient(const std::map<std::string, int>& counts, int k) {
    for (const auto& [type, c] : counts)
        if (c < k) return type;
    return {};
}

} // namespace

Episode sample_episode(const Corpus& corpus, int n_way, int k_shot, int k_query, std::uint64_t seed) {
    if (n_way < 1 || k_shot < 1 || k_query < 1) throw SamplingError("", "N, K and K_query must be positive");
    const auto counts = type_counts(corpus);
    std::vector<std::string> eligible;
    std::string short_type;
    for (const auto& [type, c] : counts) {
        if (c >= k_shot + k_query)
            eligible.push_back(type);
        else if (short_type.empty())
            short_type = type;
    }
    if (static_cast<int>(eligible.size()) < n_way) {
        std::string msg = "need " + std::to_string(n_way) + " types with >= " + std::to_string(k_shot + k_query) +
                          " instances, corpus has " + std::to_string(eligible.size());
        if (!short_type.empty())
            msg += "; type '" + short_type + "' has only " + std::to_string(counts.at(short_type));
        throw SamplingError(short_type, msg);
    }

    constexpr int kAttempts = 8;
    std::string deficient;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
        std::vector<std::string> types = eligible;
        std::shuffle(types.begin(), types.end(), rng);
        types.resize(static_cast<size_t>(n_way));
        std::sort(types.begin(), types.end());
        const std::set<std::string> type_set(types.begin(), types.end());

        std::vector<size_t> order;
        for (size_t i = 0; i < corpus.size(); ++i) {
            const auto& spans = corpus[i].spans;
            if (spans.empty()) continue;
            if (std::all_of(spans.begin(), spans.end(), [&](const EntitySpan& s) { return type_set.count(s.type); }))
                order.push_back(i);
        }
        std::shuffle(order.begin(), order.end(), rng);

        std::vector<bool> used(corpus.size(), false);
        GreedyFill support = greedy_fill(corpus, order, used, types, k_shot);
        deficient = first_deficient(support.counts, k_shot);
        if (!deficient.empty()) continue;
        for (size_t i : support.chosen) used[i] = true;
        GreedyFill query = greedy_fill(corpus, order, used, types, k_query);
        deficient = first_deficient(query.counts, k_query);
        if (!deficient.empty()) continue;

        Episode ep;
        ep.types = types;
        ep.seed = seed;
        for (size_t i : support.chosen) ep.support.push_back(corpus[i]);
        for (size_t i : query.chosen) ep.query.push_back(corpus[i]);
        return ep;
    }
    throw SamplingError(deficient, "could not fill type '" + deficient + "' to the requested shot count");
}

void check_episode(const Episode& episode, int n_way, int k_shot) {
    if (static_cast<int>(episode.types.size()) != n_way)
        throw InvariantError("episode has " + std::to_string(episode.types.size()) + " types, expected " +
                             std::to_string(n_way));
    const std::set<std::string> type_set(episode.types.begin(), episode.types.end());
    if (type_set.size() != episode.types.size()) throw InvariantError("duplicate episode types");
    std::map<std::string, int> support_counts;
    auto audit = [&](const std::vector<Sentence>& part, std::map<std::string, int>* counts) {
        for (const auto& s : part) {
            s.validate();
            for (const auto& span : s.spans) {
                if (!type_set.count(span.type)) throw InvariantError("span type '" + span.type + "' not in episode");
                if (counts) ++(*counts)[span.type];
            }
        }
    };
    audit(episode.support, &support_counts);
    audit(episode.query, nullptr);
    for (const auto& t : episode.types)
        if (support_counts[t] < k_shot)
            throw InvariantError("type '" + t + "' has " + std::to_string(support_counts[t]) + " support spans");
}

nlohmann::json sentence_to_json(const Sentence& s) {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& span : s.spans) spans.push_back({{"start", span.start}, {"end", span.end}, {"type", span.type}});
    return {{"tokens", s.tokens}, {"spans", spans}};
}

Sentence sentence_from_json(const nlohmann::json& j) {
    Sentence s;
    s.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& span : j.at("spans"))
        s.spans.push_back({span.at("start").get<int>(), span.at("end").get<int>(), span.at("type").get<std::string>()});
    s.validate();
    return s;
}

nlohmann::json episode_to_json(const Episode& e) {
    nlohmann::json support = nlohmann::json::array(), query = nlohmann::json::array();
    for (const auto& s : e.support) support.push_back(sentence_to_json(s));
    for (const auto& s : e.query) query.push_back(sentence_to_json(s));
    return {{"support", support}, {"query", query}, {"types", e.types}, {"seed", e.seed}};
}

Episode episode_from_json(const nlohmann::json& j) {
    Episode e;
    for (const auto& s : j.at("support")) e.support.push_back(sentence_from_json(s));
    for (const auto& s : j.at("query")) e.query.push_back(sentence_from_json(s));
    e.types = j.at("types").get<std::vector<std::string>>();
    e.seed = j.at("seed").get<std::uint64_t>();
    return e;
}

std::vector<Episode> read_episodes(std::istream& in) {
    std::vector<Episode> episodes;
    std::string line;
    size_t ln = 0;
    while (std::getline(in, line)) {
        ++ln;
        if (line.empty()) continue;
        try {
            episodes.push_back(episode_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ln, ex.what());
        }
    }
    return episodes;
}

void write_episodes(std::ostream& out, const std::vector<Episode>& episodes) {
    for (const auto& e : episodes) out << episode_to_json(e).dump() << '\n';
}

} // namespace bdcp
