#include "bdcp/encoder.hpp"

#include "bdcp/checkpoint.hpp"
#include "bdcp/error.hpp"
#include "bdcp/params.hpp"

#include <cmath>
#include <iostream>

namespace bdcp {

Vocabulary::Vocabulary() { add(std::string(kUnknownToken)); }

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
}

void Vocabulary::add(const std::string& w) {
    if (w == kMaskToken || index_.count(w)) return;
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
}

int Vocabulary::lookup(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnknown : it->second;
}

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

} // namespace

EncoderParams init_encoder(const EncoderConfig& config, Vocabulary vocab, std::uint64_t seed) {
    if (config.width < 1 || config.blocks < 0 || config.heads < 1 || config.width % config.heads != 0)
        throw ConfigError("encoder width must be a positive multiple of the head count");
    if (config.dropout < 0.0 || config.dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (config.max_length < 1) throw ConfigError("max_length must be positive");
    if (!(config.embedding_scale > 0.0)) throw ConfigError("embedding_scale must be positive");

    EncoderParams p;
    p.config = config;
    p.vocab = std::move(vocab);
    p.seed = seed;
    std::mt19937_64 rng(seed);
    const int c = config.width;
    const double sc = 1.0 / std::sqrt(static_cast<double>(c));
    p.embedding = gaussian(p.vocab.size(), c, config.embedding_scale, rng);
    p.emb_ln_gain = Matrix::Ones(1, c);
    p.emb_ln_bias = Matrix::Zero(1, c);
    for (int b = 0; b < config.blocks; ++b) {
        TransformerBlock blk;
        blk.wq = gaussian(c, c, sc, rng);
        blk.wk = gaussian(c, c, sc, rng);
        blk.wv = gaussian(c, c, sc, rng);
        blk.wo = gaussian(c, c, sc, rng);
        blk.bq = blk.bk = blk.bv = blk.bo = Matrix::Zero(1, c);
        blk.ln1_gain = Matrix::Ones(1, c);
        blk.ln1_bias = Matrix::Zero(1, c);
        blk.w1 = gaussian(c, config.ffn_width, sc, rng);
        blk.b1 = Matrix::Zero(1, config.ffn_width);
        blk.w2 = gaussian(config.ffn_width, c, 1.0 / std::sqrt(static_cast<double>(config.ffn_width)), rng);
        blk.b2 = Matrix::Zero(1, c);
        blk.ln2_gain = Matrix::Ones(1, c);
        blk.ln2_bias = Matrix::Zero(1, c);
        p.blocks.push_back(std::move(blk));
    }
    return p;
}

Matrix positional_encoding(int n, int width) {
    Matrix pe(n, width);
    for (int pos = 0; pos < n; ++pos) {
        for (int i = 0; i < width; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
            pe(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
        }
    }
    return pe;
}

std::vector<int> token_ids(const EncoderParams& params, std::span<const std::string> tokens) {
    if (tokens.empty()) throw InvariantError("encode: empty token sequence");
    size_t n = tokens.size();
    if (n > static_cast<size_t>(params.config.max_length)) {
        std::cerr << "warning: sequence of " << n << " tokens truncated to " << params.config.max_length << '\n';
        n = static_cast<size_t>(params.config.max_length);
    }
    std::vector<int> ids(n);
    for (size_t i = 0; i < n; ++i) ids[i] = params.vocab.lookup(tokens[i]);
    return ids;
}

ag::Var encode(ag::Tape& tape, const EncoderParams& params, EncoderParams* grads,
               std::span<const std::string> tokens, Mode mode, std::mt19937_64* rng) {
    const double drop = mode == Mode::Training ? params.config.dropout : 0.0;
    if (drop > 0.0 && !rng) throw InvariantError("encode: training mode requires an rng");
    auto leaf = [&](const Matrix& value, Matrix* sink) { return tape.param(value, grads ? sink : nullptr); };

    const std::vector<int> ids = token_ids(params, tokens);
    const int n = static_cast<int>(ids.size());
    const int c = params.config.width;
    const int heads = params.config.heads;
    const int dh = c / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    ag::Var emb = leaf(params.embedding, grads ? &grads->embedding : nullptr);
    ag::Var x = ag::add(ag::gather_rows(emb, ids), tape.constant(positional_encoding(n, c)));
    x = ag::layer_norm_rows(x, leaf(params.emb_ln_gain, grads ? &grads->emb_ln_gain : nullptr),
                            leaf(params.emb_ln_bias, grads ? &grads->emb_ln_bias : nullptr));
    if (drop > 0.0) x = ag::dropout(x, drop, *rng);

    for (size_t b = 0; b < params.blocks.size(); ++b) {
        const TransformerBlock& p = params.blocks[b];
        TransformerBlock* g = grads ? &grads->blocks[b] : nullptr;
        auto linear = [&](ag::Var in, const Matrix& w, const Matrix& bias, Matrix* gw, Matrix* gb) {
            return ag::add_row(ag::matmul(in, leaf(w, gw)), leaf(bias, gb));
        };
        ag::Var q = linear(x, p.wq, p.bq, g ? &g->wq : nullptr, g ? &g->bq : nullptr);
        ag::Var k = linear(x, p.wk, p.bk, g ? &g->wk : nullptr, g ? &g->bk : nullptr);
        ag::Var v = linear(x, p.wv, p.bv, g ? &g->wv : nullptr, g ? &g->bv : nullptr);
        std::vector<ag::Var> head_out;
        head_out.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            ag::Var qh = ag::slice_cols(q, h * dh, dh);
            ag::Var kh = ag::slice_cols(k, h * dh, dh);
            ag::Var vh = ag::slice_cols(v, h * dh, dh);
            ag::Var att = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt_dh));
            head_out.push_back(ag::matmul(att, vh));
        }
        ag::Var attn = linear(ag::concat_cols(head_out), p.wo, p.bo, g ? &g->wo : nullptr, g ? &g->bo : nullptr);
        if (drop > 0.0) attn = ag::dropout(attn, drop, *rng);
        x = ag::layer_norm_rows(ag::add(x, attn), leaf(p.ln1_gain, g ? &g->ln1_gain : nullptr),
                                leaf(p.ln1_bias, g ? &g->ln1_bias : nullptr));

        ag::Var ff = ag::gelu(linear(x, p.w1, p.b1, g ? &g->w1 : nullptr, g ? &g->b1 : nullptr));
        ff = linear(ff, p.w2, p.b2, g ? &g->w2 : nullptr, g ? &g->b2 : nullptr);
        if (drop > 0.0) ff = ag::dropout(ff, drop, *rng);
        x = ag::layer_norm_rows(ag::add(x, ff), leaf(p.ln2_gain, g ? &g->ln2_gain : nullptr),
                                leaf(p.ln2_bias, g ? &g->ln2_bias : nullptr));
    }
    return x;
}

Matrix encode(const EncoderParams& params, std::span<const std::string> tokens) {
    ag::Tape tape;
    return encode(tape, params, nullptr, tokens, Mode::Inference).value();
}

void save_encoder(std::ostream& out, const EncoderParams& params) {
    CheckpointWriter w(out, "encoder");
    const auto& c = params.config;
    w.i64(c.width);
    w.i64(c.blocks);
    w.i64(c.heads);
    w.i64(c.ffn_width);
    w.f64(c.dropout);
    w.i64(c.max_length);
    w.f64(c.embedding_scale);
    w.u64(params.seed);
    w.strings(params.vocab.words());
    const_cast<EncoderParams&>(params).visit([&](const std::string& name, Matrix& m) { w.matrix(name, m); });
}

EncoderParams load_encoder(std::istream& in) {
    CheckpointReader r(in, "encoder");
    EncoderConfig c;
    c.width = static_cast<int>(r.i64());
    c.blocks = static_cast<int>(r.i64());
    c.heads = static_cast<int>(r.i64());
    c.ffn_width = static_cast<int>(r.i64());
    c.dropout = r.f64();
    c.max_length = static_cast<int>(r.i64());
    c.embedding_scale = r.f64();
    const auto seed = r.u64();
    auto words = r.strings();
    if (words.empty() || words.front() != Vocabulary::kUnknownToken) throw Error("checkpoint vocabulary malformed");
    words.erase(words.begin());
    EncoderParams p = init_encoder(c, Vocabulary(words), seed);
    p.visit([&](const std::string& name, Matrix& m) { r.matrix(name, m); });
    return p;
}

Matrix adapter_encode(const PretrainedAdapter* adapter, std::span<const std::string> tokens) {
    if (!adapter) throw CapabilityError("no pretrained encoder adapter configured");
    if (tokens.empty()) throw InvariantError("adapter_encode: empty token sequence");
    Matrix out = adapter->encode(tokens);
    if (out.rows() != static_cast<Eigen::Index>(tokens.size()) || out.cols() != adapter->width())
        throw InvariantError("adapter returned " + std::to_string(out.rows()) + "x" + std::to_string(out.cols()) +
                             " for " + std::to_string(tokens.size()) + " tokens");
    return out;
}

} // namespace bdcp
