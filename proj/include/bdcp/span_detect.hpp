// Stage 1: boundary-discriminative span detection.
//
// Token representations from the span encoder are matched against a bank of
// unit-norm components (N_c per boundary class) under an angular-margin
// softmax, pulled toward the stop-gradient class centroids, and classified by
// a linear BIOES head trained with mean + alpha * max cross-entropy.

#pragma once

#include "bdcp/autograd.hpp"
#include "bdcp/corpus.hpp"
#include "bdcp/encoder.hpp"

#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bdcp {

struct ComponentBank {
    int classes = kNumBoundaryClasses; // N_b
    int per_class = 15;                // N_c
    Matrix components;                 // (N_b * N_c) x C, row k * N_c + j is component j of class k

    int width() const { return static_cast<int>(components.cols()); }
    int total() const { return classes * per_class; }
    int index(int cls, int j) const { return cls * per_class + j; }

    /// Rescales every component to unit norm.
    void project();

    template <class F>
    void visit(F&& f) {
        f(std::string("components"), components);
    }
};

/// Unit-normalised samples from a spherical Gaussian.
ComponentBank init_bank(int per_class, int width, std::uint64_t seed);

struct SpanHead {
    Matrix weight; // C x N_b
    Matrix bias;   // 1 x N_b
    double margin = 0.01;
    double tau = 0.025;
    double alpha = 0.2;
    double gamma_assign = 0.1;
    double gamma_diversity = 0.1;
    /// Decode boundaries by nearest class centroid instead of the linear head.
    bool centroid_decoding = false;

    /// Throws ConfigError when tau <= 0 or the margin leaves [0, pi/2).
    void validate() const;

    template <class F>
    void visit(F&& f) {
        f(std::string("head.weight"), weight);
        f(std::string("head.bias"), bias);
    }
};

SpanHead init_span_head(int width, std::uint64_t seed);

struct SpanModel {
    EncoderParams encoder;
    ComponentBank bank;
    SpanHead head;

    template <class F>
    void visit(F&& f) {
        encoder.visit(f);
        bank.visit(f);
        head.visit(f);
    }
};

// ---- value-level operations -------------------------------------------------

/// Most cosine-similar component of class `cls`; ties resolve to the smallest
/// index. Returns the within-class index and the component. Throws on zero h.
std::pair<int, RowVector> nearest_component(const RowVector& h, const ComponentBank& bank, int cls);

/// Margin softmax probability of global component `target` for representation h.
double margin_prob(const RowVector& h, int target, const ComponentBank& bank, double margin, double tau);

/// Class centroids, N_b x C.
Matrix boundary_centroids(const ComponentBank& bank);

// ---- differentiable losses --------------------------------------------------
// H is L x C (all tokens of a batch), labels holds the gold boundary class of
// every row, `components` is the bank as a tape variable.

/// Global component targets: nearest component inside each token's gold block.
std::vector<int> assignment_targets(const Matrix& h, const std::vector<int>& labels, const ComponentBank& bank);

ag::Var assignment_loss(ag::Var h, const std::vector<int>& labels, ag::Var components, const ComponentBank& bank,
                        double margin, double tau);

/// Centroids are taken from `components` through a stop-gradient.
ag::Var diversity_loss(ag::Var h, const std::vector<int>& labels, ag::Var components, const ComponentBank& bank,
                       double margin, double tau);

ag::Var ce_max_loss(ag::Var h, const std::vector<int>& labels, ag::Var weight, ag::Var bias, double alpha);

struct SpanLoss {
    ag::Var total;
    ag::Var classification; // L_c
    ag::Var assignment;     // L_a
    ag::Var diversity;      // L_d
};

/// L_c + gamma_assign * L_a + gamma_diversity * L_d. Terms with a zero weight are
/// still reported but skipped from the graph.
SpanLoss span_stage_loss(ag::Tape& tape, ag::Var h, const std::vector<int>& labels, ag::Var components,
                         const ComponentBank& bank, ag::Var weight, ag::Var bias, const SpanHead& head);

/// Encodes `sentences` and evaluates the stage loss. `grads` may be null.
SpanLoss span_batch_loss(ag::Tape& tape, const SpanModel& model, SpanModel* grads,
                         std::span<const Sentence> sentences, Mode mode, std::mt19937_64* rng);

/// Inference-mode stage loss value.
double span_loss_value(const SpanModel& model, std::span<const Sentence> sentences);

/// Gold labels for the encoded prefix of a sentence.
std::vector<int> encoded_labels(const EncoderParams& encoder, const Sentence& s);

// ---- decoding ---------------------------------------------------------------

std::vector<Boundary> argmax_labels(const Matrix& logits);
std::vector<Boundary> predict_labels(const SpanModel& model, std::span<const std::string> tokens);
/// Argmax boundary labels followed by the repairing decoder. Tokens past the
/// encoder's maximum length are treated as O.
std::vector<std::pair<int, int>> predict_spans(const SpanModel& model, std::span<const std::string> tokens);

/// Per boundary class, how many gold-labelled tokens pick each component as
/// their nearest within the class block. Result is N_b x N_c.
std::vector<std::vector<int>> component_usage(const SpanModel& model, std::span<const Sentence> sentences);

SpanModel init_span_model(const EncoderConfig& config, const Vocabulary& vocab, int per_class, std::uint64_t seed);

void save_span_model(std::ostream& out, const SpanModel& model);
SpanModel load_span_model(std::istream& in);

} // namespace bdcp
