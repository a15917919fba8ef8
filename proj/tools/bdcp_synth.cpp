// Writes the procedural toy corpus and its synonym lexicon.

#include "bdcp/cli.hpp"
#include "bdcp/synthetic.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Generate a synthetic patterned NER corpus and synonym lexicon"};
    bdcp::SyntheticConfig c;
    std::string corpus_path, lexicon_path;
    app.add_option("--corpus", corpus_path, "column-format corpus output")->required();
    app.add_option("--lexicon", lexicon_path, "lexicon output");
    app.add_option("--types", c.types, "entity types");
    app.add_option("--words-per-type", c.words_per_type, "size of each per-type word pool");
    app.add_option("--fillers", c.fillers, "filler vocabulary size");
    app.add_option("--sentences", c.sentences, "sentences to generate");
    app.add_option("--max-mentions", c.max_mentions, "mentions per sentence upper bound");
    app.add_option("--two-word-rate", c.two_word_rate, "share of two-token mentions");
    app.add_option("--synonyms", c.synonyms, "lexicon candidates per word");
    app.add_option("--seed", c.seed, "generator seed");
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& ex) {
        std::cerr << bdcp::kErrorPrefix << ex.what() << '\n';
        return 2;
    }
    try {
        std::ofstream corpus(corpus_path, std::ios::binary);
        if (!corpus) throw std::runtime_error("cannot write '" + corpus_path + "'");
        bdcp::write_corpus(corpus, bdcp::synthetic_corpus(c));
        if (!lexicon_path.empty()) {
            std::ofstream lex(lexicon_path, std::ios::binary);
            if (!lex) throw std::runtime_error("cannot write '" + lexicon_path + "'");
            lex << bdcp::serialize_lexicon(bdcp::synthetic_lexicon(c));
        }
    } catch (const std::exception& ex) {
        std::cerr << bdcp::kErrorPrefix << ex.what() << '\n';
        return 1;
    }
    return 0;
}
