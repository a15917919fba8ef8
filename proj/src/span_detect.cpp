#include "bdcp/span_detect.hpp"

#include "bdcp/checkpoint.hpp"
#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace bdcp {

void ComponentBank::project() {
    for (Eigen::Index i = 0; i < components.rows(); ++i) {
        const double n = components.row(i).norm();
        // rows already on the sphere are left bit-identical
        if (n > 0.0 && std::abs(n - 1.0) > 1e-12) components.row(i) /= n;
    }
}

ComponentBank init_bank(int per_class, int width, std::uint64_t seed) {
    if (per_class < 1 || width < 1) throw ConfigError("component bank needs positive N_c and width");
    ComponentBank bank;
    bank.per_class = per_class;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    bank.components.resize(bank.total(), width);
    for (Eigen::Index i = 0; i < bank.components.rows(); ++i) {
        do {
            for (Eigen::Index j = 0; j < width; ++j) bank.components(i, j) = dist(rng);
        } while (bank.components.row(i).norm() == 0.0);
    }
    bank.project();
    return bank;
}

void SpanHead::validate() const {
    if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive");
    if (!(margin >= 0.0 && margin < std::numbers::pi / 2)) throw ConfigError("margin must lie in [0, pi/2)");
    if (alpha < 0.0 || gamma_assign < 0.0 || gamma_diversity < 0.0)
        throw ConfigError("span loss weights must be non-negative");
}

SpanHead init_span_head(int width, std::uint64_t seed) {
    SpanHead head;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(width)));
    head.weight.resize(width, kNumBoundaryClasses);
    for (Eigen::Index j = 0; j < head.weight.cols(); ++j)
        for (Eigen::Index i = 0; i < head.weight.rows(); ++i) head.weight(i, j) = dist(rng);
    head.bias = Matrix::Zero(1, kNumBoundaryClasses);
    return head;
}

SpanModel init_span_model(const EncoderConfig& config, const Vocabulary& vocab, int per_class, std::uint64_t seed) {
    SpanModel m;
    m.encoder = init_encoder(config, vocab, derive_seed(seed, "span.encoder"));
    m.bank = init_bank(per_class, config.width, derive_seed(seed, "span.bank"));
    m.head = init_span_head(config.width, derive_seed(seed, "span.head"));
    return m;
}

// ---- value-level ------------------------------------------------------------

std::pair<int, RowVector> nearest_component(const RowVector& h, const ComponentBank& bank, int cls) {
    if (cls < 0 || cls >= bank.classes) throw InvariantError("boundary class out of range");
    const double hn = h.norm();
    if (!(hn > 0.0) || !h.allFinite()) throw InvariantError("nearest_component: representation must be finite and nonzero");
    int best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < bank.per_class; ++j) {
        const auto u = bank.components.row(bank.index(cls, j));
        const double c = h.dot(u) / (hn * u.norm());
        if (c > best_cos) {
            best_cos = c;
            best = j;
        }
    }
    return {best, bank.components.row(bank.index(cls, best))};
}

double margin_prob(const RowVector& h, int target, const ComponentBank& bank, double margin, double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive");
    if (target < 0 || target >= bank.total()) throw InvariantError("component index out of range");
    const double hn = h.norm();
    if (!(hn > 0.0)) throw InvariantError("margin_prob: zero representation");
    std::vector<double> logits(static_cast<size_t>(bank.total()));
    for (int l = 0; l < bank.total(); ++l) {
        const auto u = bank.components.row(l);
        const double c = std::clamp(h.dot(u) / (hn * u.norm()), -1.0, 1.0);
        if (l == target)
            logits[static_cast<size_t>(l)] = std::cos(std::min(std::acos(c) + margin, std::numbers::pi)) / tau;
        else
            logits[static_cast<size_t>(l)] = c / tau;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return std::exp(logits[static_cast<size_t>(target)] - mx) / z;
}

Matrix boundary_centroids(const ComponentBank& bank) {
    Matrix c(bank.classes, bank.width());
    for (int k = 0; k < bank.classes; ++k)
        c.row(k) = bank.components.middleRows(bank.index(k, 0), bank.per_class).colwise().mean();
    return c;
}

// ---- losses -----------------------------------------------------------------

namespace {

void check_batch(const ag::Var& h, const std::vector<int>& labels) {
    if (h.rows() == 0 || labels.empty()) throw InvariantError("empty token batch");
    if (static_cast<Eigen::Index>(labels.size()) != h.rows()) throw InvariantError("label count does not match batch");
    for (int y : labels)
        if (y < 0 || y >= kNumBoundaryClasses) throw InvariantError("boundary label out of range");
}

Matrix cosine_matrix(const Matrix& a, const Matrix& b) {
    Matrix an = a, bn = b;
    for (Eigen::Index i = 0; i < an.rows(); ++i) an.row(i) /= std::max(an.row(i).norm(), 1e-12);
    for (Eigen::Index i = 0; i < bn.rows(); ++i) bn.row(i) /= std::max(bn.row(i).norm(), 1e-12);
    return an * bn.transpose();
}

ag::Var cosines(ag::Var a, ag::Var b) {
    return ag::matmul(ag::normalize_rows(a), ag::transpose(ag::normalize_rows(b)));
}

} // namespace

std::vector<int> assignment_targets(const Matrix& h, const std::vector<int>& labels, const ComponentBank& bank) {
    const Matrix cos = cosine_matrix(h, bank.components);
    std::vector<int> targets(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        const int k = labels[i];
        int best = 0;
        double best_cos = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < bank.per_class; ++j) {
            const double c = cos(static_cast<Eigen::Index>(i), bank.index(k, j));
            if (c > best_cos) {
                best_cos = c;
                best = j;
            }
        }
        targets[i] = bank.index(k, best);
    }
    return targets;
}

ag::Var assignment_loss(ag::Var h, const std::vector<int>& labels, ag::Var components, const ComponentBank& bank,
                        double margin, double tau) {
    check_batch(h, labels);
    const std::vector<int> targets = assignment_targets(h.value(), labels, bank);
    ag::Var logits = ag::margin_logits(cosines(h, components), targets, margin, tau);
    return ag::mean(ag::cross_entropy_rows(logits, targets));
}

ag::Var diversity_loss(ag::Var h, const std::vector<int>& labels, ag::Var components, const ComponentBank& bank,
                       double margin, double tau) {
    check_batch(h, labels);
    ComponentBank frozen = bank;
    frozen.components = ag::stop_gradient(components).value();
    ag::Var centroids = h.tape()->constant(boundary_centroids(frozen));
    ag::Var logits = ag::margin_logits(cosines(h, centroids), labels, margin, tau);
    return ag::mean(ag::cross_entropy_rows(logits, labels));
}

ag::Var ce_max_loss(ag::Var h, const std::vector<int>& labels, ag::Var weight, ag::Var bias, double alpha) {
    check_batch(h, labels);
    ag::Var ce = ag::cross_entropy_rows(ag::add_row(ag::matmul(h, weight), bias), labels);
    return ag::add(ag::mean(ce), ag::scale(ag::max_element(ce), alpha));
}

SpanLoss span_stage_loss(ag::Tape& tape, ag::Var h, const std::vector<int>& labels, ag::Var components,
                         const ComponentBank& bank, ag::Var weight, ag::Var bias, const SpanHead& head) {
    head.validate();
    SpanLoss out;
    out.classification = ce_max_loss(h, labels, weight, bias, head.alpha);
    out.total = out.classification;
    if (head.gamma_assign > 0.0) {
        out.assignment = assignment_loss(h, labels, components, bank, head.margin, head.tau);
        out.total = ag::add(out.total, ag::scale(out.assignment, head.gamma_assign));
    } else {
        out.assignment = tape.scalar(0.0);
    }
    if (head.gamma_diversity > 0.0) {
        out.diversity = diversity_loss(h, labels, components, bank, head.margin, head.tau);
        out.total = ag::add(out.total, ag::scale(out.diversity, head.gamma_diversity));
    } else {
        out.diversity = tape.scalar(0.0);
    }
    return out;
}

std::vector<int> encoded_labels(const EncoderParams& encoder, const Sentence& s) {
    const auto labels = s.boundary_labels();
    const size_t n = std::min(labels.size(), static_cast<size_t>(encoder.config.max_length));
    // A span cut by truncation keeps its visible prefix labels; the loss only
    // sees the encoded rows.
    std::vector<int> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<int>(labels[i]);
    return out;
}

SpanLoss span_batch_loss(ag::Tape& tape, const SpanModel& model, SpanModel* grads,
                         std::span<const Sentence> sentences, Mode mode, std::mt19937_64* rng) {
    if (sentences.empty()) throw InvariantError("empty sentence batch");
    std::vector<ag::Var> reps;
    std::vector<int> labels;
    for (const auto& s : sentences) {
        reps.push_back(encode(tape, model.encoder, grads ? &grads->encoder : nullptr, s.tokens, mode, rng));
        const auto l = encoded_labels(model.encoder, s);
        labels.insert(labels.end(), l.begin(), l.end());
    }
    ag::Var h = reps.size() == 1 ? reps[0] : ag::concat_rows(reps);
    ag::Var comps = tape.param(model.bank.components, grads ? &grads->bank.components : nullptr);
    ag::Var w = tape.param(model.head.weight, grads ? &grads->head.weight : nullptr);
    ag::Var b = tape.param(model.head.bias, grads ? &grads->head.bias : nullptr);
    return span_stage_loss(tape, h, labels, comps, model.bank, w, b, model.head);
}

double span_loss_value(const SpanModel& model, std::span<const Sentence> sentences) {
    ag::Tape tape;
    return span_batch_loss(tape, model, nullptr, sentences, Mode::Inference, nullptr).total.scalar();
}

// ---- decoding ---------------------------------------------------------------

std::vector<Boundary> argmax_labels(const Matrix& logits) {
    std::vector<Boundary> out(static_cast<size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index j = 0;
        logits.row(i).maxCoeff(&j);
        out[static_cast<size_t>(i)] = static_cast<Boundary>(j);
    }
    return out;
}

std::vector<Boundary> predict_labels(const SpanModel& model, std::span<const std::string> tokens) {
    const Matrix h = encode(model.encoder, tokens);
    Matrix scores;
    if (model.head.centroid_decoding)
        scores = cosine_matrix(h, boundary_centroids(model.bank));
    else
        scores = (h * model.head.weight).rowwise() + model.head.bias.row(0);
    auto labels = argmax_labels(scores);
    labels.resize(tokens.size(), Boundary::O);
    return labels;
}

std::vector<std::pair<int, int>> predict_spans(const SpanModel& model, std::span<const std::string> tokens) {
    return bioes_to_spans(predict_labels(model, tokens));
}

std::vector<std::vector<int>> component_usage(const SpanModel& model, std::span<const Sentence> sentences) {
    const ComponentBank& bank = model.bank;
    std::vector<std::vector<int>> usage(static_cast<size_t>(bank.classes),
                                        std::vector<int>(static_cast<size_t>(bank.per_class), 0));
    for (const auto& s : sentences) {
        const Matrix h = encode(model.encoder, s.tokens);
        const auto labels = encoded_labels(model.encoder, s);
        const auto targets = assignment_targets(h, labels, bank);
        for (size_t i = 0; i < labels.size(); ++i)
            ++usage[static_cast<size_t>(labels[i])][static_cast<size_t>(targets[i] - bank.index(labels[i], 0))];
    }
    return usage;
}

void save_span_model(std::ostream& out, const SpanModel& model) {
    save_encoder(out, model.encoder);
    CheckpointWriter w(out, "span_head");
    w.i64(model.bank.classes);
    w.i64(model.bank.per_class);
    w.i64(model.bank.width());
    w.f64(model.head.margin);
    w.f64(model.head.tau);
    w.f64(model.head.alpha);
    w.f64(model.head.gamma_assign);
    w.f64(model.head.gamma_diversity);
    w.u64(model.head.centroid_decoding ? 1 : 0);
    w.matrix("components", model.bank.components);
    w.matrix("head.weight", model.head.weight);
    w.matrix("head.bias", model.head.bias);
}

SpanModel load_span_model(std::istream& in) {
    SpanModel m;
    m.encoder = load_encoder(in);
    CheckpointReader r(in, "span_head");
    const auto classes = r.i64();
    const auto per_class = r.i64();
    const auto width = r.i64();
    if (classes != kNumBoundaryClasses || width != m.encoder.config.width || per_class < 1)
        throw Error("span checkpoint bank shape inconsistent with encoder");
    m.bank.per_class = static_cast<int>(per_class);
    m.bank.components = Matrix::Zero(m.bank.total(), width);
    m.head.margin = r.f64();
    m.head.tau = r.f64();
    m.head.alpha = r.f64();
    m.head.gamma_assign = r.f64();
    m.head.gamma_diversity = r.f64();
    m.head.centroid_decoding = r.u64() != 0;
    m.head.weight = Matrix::Zero(width, kNumBoundaryClasses);
    m.head.bias = Matrix::Zero(1, kNumBoundaryClasses);
    r.matrix("components", m.bank.components);
    r.matrix("head.weight", m.head.weight);
    r.matrix("head.bias", m.head.bias);
    return m;
}

} // namespace bdcp
