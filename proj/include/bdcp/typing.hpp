// Stage 2: correlation-purified entity typing.
//
// Spans and their sentence contexts are mean-pooled from the typing encoder.
// Prototype classification (squared Euclidean by default) drives L_t; an
// InfoNCE term over in-batch contexts (L_p) rewards span/context agreement;
// a diagonal-Gaussian bottleneck KL (L_r) pulls the span and context
// bottleneck distributions together.

#pragma once

#include "bdcp/autograd.hpp"
#include "bdcp/corpus.hpp"
#include "bdcp/encoder.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bdcp {

struct DiagonalGaussian {
    Vector mean;
    Vector variance; // strictly positive
};

enum class Distance { SquaredEuclidean, Cosine };

/// Two-layer perceptron: relu(x W1 + b1) W2 + b2.
struct Mlp {
    Matrix w1, b1, w2, b2;

    template <class F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "w1", w1);
        f(prefix + "b1", b1);
        f(prefix + "w2", w2);
        f(prefix + "b2", b2);
    }
};

Mlp init_mlp(int in, int hidden, int out, std::mt19937_64& rng);
ag::Var mlp_forward(ag::Tape& tape, const Mlp& mlp, Mlp* grads, ag::Var x);

inline constexpr double kVarianceFloor = 1e-4;

struct TypingHead {
    Matrix gp_weight; // 2C x 1, scores a concatenated (span, context) pair
    Matrix gp_bias;   // 1 x 1
    Mlp ib_mean;      // C -> D
    Mlp ib_var;       // C -> D, raw output mapped through softplus + floor
    double gamma_facilitate = 1e-3; // gamma3
    double gamma_filter = 1e-5;     // gamma4
    Distance distance = Distance::SquaredEuclidean;

    int bottleneck() const { return static_cast<int>(ib_mean.w2.cols()); }
    void validate() const;

    template <class F>
    void visit(F&& f) {
        f(std::string("gp.weight"), gp_weight);
        f(std::string("gp.bias"), gp_bias);
        ib_mean.visit(f, "ib_mean.");
        ib_var.visit(f, "ib_var.");
    }
};

TypingHead init_typing_head(int width, int bottleneck, std::uint64_t seed);

struct TypingModel {
    EncoderParams encoder;
    TypingHead head;

    template <class F>
    void visit(F&& f) {
        encoder.visit(f);
        head.visit(f);
    }
};

TypingModel init_typing_model(const EncoderConfig& config, const Vocabulary& vocab, int bottleneck,
                              std::uint64_t seed);

// ---- pooling ----------------------------------------------------------------

RowVector span_repr(const Matrix& h, std::pair<int, int> span);
/// Mean of rows outside every span; falls back to the mean of all rows when
/// the spans cover the sentence.
RowVector context_repr(const Matrix& h, const std::vector<std::pair<int, int>>& spans);
ag::Var span_repr(ag::Var h, std::pair<int, int> span);
ag::Var context_repr(ag::Var h, const std::vector<std::pair<int, int>>& spans);

// ---- correlation facilitation -----------------------------------------------

/// scores(i, j) = g_p([span_i ; context_j]) for a linear g_p, B x B.
ag::Var compatibility_scores(ag::Var spans, ag::Var contexts, ag::Var weight, ag::Var bias);

/// -mean_i [ E1(s_ii) - E2(logsumexp_j s_ij) ]. With `activations` false E1 and
/// E2 are the identity (the textbook InfoNCE loss); otherwise E1 = softplus and
/// E2 = relu.
ag::Var infonce_from_scores(ag::Var scores, bool activations = true);

/// InfoNCE over aligned (span, context) pairs with in-batch negatives. Returns
/// a zero constant and bumps `skipped` when fewer than two pairs are given.
ag::Var infonce_loss(ag::Var spans, ag::Var contexts, ag::Var weight, ag::Var bias, int* skipped = nullptr);

// ---- bottleneck -------------------------------------------------------------

struct BottleneckMoments {
    ag::Var mean;
    ag::Var variance;
};

BottleneckMoments ib_moments(ag::Tape& tape, const TypingHead& head, TypingHead* grads, ag::Var h);

/// Bottleneck distribution of one representation. Training mode draws
/// t = mean + sqrt(variance) * eps with eps from N(0, I) seeded by `seed`;
/// inference mode returns t = mean. Throws NumericalError on non-finite output.
std::pair<DiagonalGaussian, Vector> ib_forward(const RowVector& h, const TypingHead& head, Mode mode,
                                                std::uint64_t seed);

/// Closed-form KL(p || q) between diagonal Gaussians.
double kl_loss(const DiagonalGaussian& p, const DiagonalGaussian& q);
/// Row-wise KL between two batches of diagonal Gaussians, B x 1.
ag::Var kl_rows(ag::Var mean_p, ag::Var var_p, ag::Var mean_q, ag::Var var_q);

// ---- prototypes -------------------------------------------------------------

using Prototypes = std::map<std::string, RowVector>;

Prototypes class_prototypes(const std::vector<std::pair<RowVector, std::string>>& support);
/// Softmax of -d(prototype, h) in the map's (sorted) type order.
std::vector<double> proto_distribution(const RowVector& h, const Prototypes& prototypes,
                                       Distance d = Distance::SquaredEuclidean);
double proto_loss(const std::vector<std::pair<RowVector, std::string>>& query, const Prototypes& prototypes,
                  Distance d = Distance::SquaredEuclidean);
/// Argmax type per representation; ties resolve to the lexicographically smallest type.
std::vector<std::string> classify_spans(const std::vector<RowVector>& spans, const Prototypes& prototypes,
                                        Distance d = Distance::SquaredEuclidean);

/// Differentiable prototype loss: sum over query rows of -log p(gold).
/// `prototypes` is K x C in the order of `types`.
ag::Var proto_loss(ag::Var query, const std::vector<int>& gold, ag::Var prototypes, Distance d);

// ---- stage loss -------------------------------------------------------------

struct TypingLoss {
    ag::Var total;
    ag::Var proto;      // L_t
    ag::Var facilitate; // L_p
    ag::Var filter;     // L_r
    int skipped_infonce = 0;
};

/// Prototypes come from gold spans in `prototype_sentences`; L_t, L_p and L_r
/// are computed over the gold spans of `target_sentences`. Passing the same
/// set for both gives the support-adaptation loss.
TypingLoss typing_stage_loss(ag::Tape& tape, const TypingModel& model, TypingModel* grads,
                             std::span<const Sentence> prototype_sentences, std::span<const Sentence> target_sentences,
                             Mode mode, std::mt19937_64* rng);

double typing_loss_value(const TypingModel& model, std::span<const Sentence> prototype_sentences,
                         std::span<const Sentence> target_sentences);

/// Inference-mode L_t + gamma3 L_p + gamma4 L_r for the gold spans of one
/// sentence against fixed prototypes (pairs are formed within the sentence).
/// Zero for a sentence without spans.
double typing_loss_fixed(const TypingModel& model, const Sentence& sentence, const Prototypes& prototypes);

/// Prototypes from the gold spans of `support` in inference mode.
Prototypes support_prototypes(const TypingModel& model, std::span<const Sentence> support);

/// Inference-mode representations of `spans` within `tokens`; spans past the
/// encoder's maximum length are clipped to the encoded prefix.
std::vector<RowVector> span_representations(const TypingModel& model, std::span<const std::string> tokens,
                                            const std::vector<std::pair<int, int>>& spans);

void save_typing_model(std::ostream& out, const TypingModel& model);
TypingModel load_typing_model(std::istream& in);

} // namespace bdcp
