// Token encoder shared by both stages: learned word embeddings plus sinusoidal
// positions, followed by post-norm transformer blocks.

#pragma once

#include "bdcp/autograd.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bdcp {

enum class Mode { Inference, Training };

class Vocabulary {
public:
    static constexpr int kUnknown = 0;
    static constexpr std::string_view kUnknownToken = "[UNK]";
    /// Attack placeholder; shares the unknown embedding.
    static constexpr std::string_view kMaskToken = "[MASK]";

    Vocabulary();
    explicit Vocabulary(const std::vector<std::string>& words);

    int lookup(std::string_view word) const;
    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

private:
    void add(const std::string& w);
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

struct EncoderConfig {
    int width = 32;  // C
    int blocks = 2;  // T
    int heads = 2;
    int ffn_width = 64;
    double dropout = 0.2;
    int max_length = 128;
    double embedding_scale = 0.3; // std of the initial word embeddings

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct TransformerBlock {
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln1_gain, ln1_bias;
    Matrix w1, b1, w2, b2;
    Matrix ln2_gain, ln2_bias;

    template <class F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "wq", wq); f(prefix + "bq", bq);
        f(prefix + "wk", wk); f(prefix + "bk", bk);
        f(prefix + "wv", wv); f(prefix + "bv", bv);
        f(prefix + "wo", wo); f(prefix + "bo", bo);
        f(prefix + "ln1_gain", ln1_gain); f(prefix + "ln1_bias", ln1_bias);
        f(prefix + "w1", w1); f(prefix + "b1", b1);
        f(prefix + "w2", w2); f(prefix + "b2", b2);
        f(prefix + "ln2_gain", ln2_gain); f(prefix + "ln2_bias", ln2_bias);
    }
};

struct EncoderParams {
    EncoderConfig config;
    Vocabulary vocab;
    std::uint64_t seed = 0;
    Matrix embedding; // |V| x C
    Matrix emb_ln_gain, emb_ln_bias;
    std::vector<TransformerBlock> blocks;

    template <class F>
    void visit(F&& f) {
        f(std::string("embedding"), embedding);
        f(std::string("emb_ln_gain"), emb_ln_gain);
        f(std::string("emb_ln_bias"), emb_ln_bias);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(f, "block" + std::to_string(i) + ".");
    }
};

EncoderParams init_encoder(const EncoderConfig& config, Vocabulary vocab, std::uint64_t seed);

/// Sinusoidal position table, n x width.
Matrix positional_encoding(int n, int width);

/// Token ids after truncation to `max_length`. Over-length input is truncated
/// with a one-line warning on stderr.
std::vector<int> token_ids(const EncoderParams& params, std::span<const std::string> tokens);

/// Records the forward pass on `tape`. `grads` (same structure as `params`,
/// zero-initialised) receives parameter gradients on backward; null leaves the
/// parameters constant. `rng` drives dropout and is required in training mode.
ag::Var encode(ag::Tape& tape, const EncoderParams& params, EncoderParams* grads,
               std::span<const std::string> tokens, Mode mode, std::mt19937_64* rng = nullptr);

/// Inference-mode representations, n x C.
Matrix encode(const EncoderParams& params, std::span<const std::string> tokens);

void save_encoder(std::ostream& out, const EncoderParams& params);
EncoderParams load_encoder(std::istream& in);

/// Boundary to externally pretrained encoders.
class PretrainedAdapter {
public:
    virtual ~PretrainedAdapter() = default;
    virtual int width() const = 0;
    virtual Matrix encode(std::span<const std::string> tokens) const = 0;
};

/// Throws CapabilityError for a null adapter and InvariantError on a shape violation.
Matrix adapter_encode(const PretrainedAdapter* adapter, std::span<const std::string> tokens);

} // namespace bdcp
