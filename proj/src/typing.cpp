#include "bdcp/typing.hpp"

#include "bdcp/checkpoint.hpp"
#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bdcp {

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

std::vector<int> range_indices(std::pair<int, int> span) {
    std::vector<int> idx;
    for (int i = span.first; i <= span.second; ++i) idx.push_back(i);
    return idx;
}

std::vector<int> context_indices(Eigen::Index n, const std::vector<std::pair<int, int>>& spans) {
    std::vector<bool> covered(static_cast<size_t>(n), false);
    for (auto [s, e] : spans)
        for (int i = std::max(s, 0); i <= e && i < n; ++i) covered[static_cast<size_t>(i)] = true;
    std::vector<int> idx;
    for (Eigen::Index i = 0; i < n; ++i)
        if (!covered[static_cast<size_t>(i)]) idx.push_back(static_cast<int>(i));
    if (idx.empty())
        for (Eigen::Index i = 0; i < n; ++i) idx.push_back(static_cast<int>(i));
    return idx;
}

void check_span(Eigen::Index n, std::pair<int, int> span) {
    if (span.first < 0 || span.second < span.first || span.second >= n)
        throw InvariantError("span outside the representation matrix");
}

std::pair<int, int> clip(std::pair<int, int> span, Eigen::Index n) {
    const int last = static_cast<int>(n) - 1;
    return {std::min(span.first, last), std::min(span.second, last)};
}

} // namespace

Mlp init_mlp(int in, int hidden, int out, std::mt19937_64& rng) {
    Mlp m;
    m.w1 = gaussian(in, hidden, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    m.b1 = Matrix::Zero(1, hidden);
    m.w2 = gaussian(hidden, out, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    m.b2 = Matrix::Zero(1, out);
    return m;
}

ag::Var mlp_forward(ag::Tape& tape, const Mlp& mlp, Mlp* grads, ag::Var x) {
    auto leaf = [&](const Matrix& v, Matrix* g) { return tape.param(v, grads ? g : nullptr); };
    ag::Var hidden = ag::relu(ag::add_row(ag::matmul(x, leaf(mlp.w1, grads ? &grads->w1 : nullptr)),
                                          leaf(mlp.b1, grads ? &grads->b1 : nullptr)));
    return ag::add_row(ag::matmul(hidden, leaf(mlp.w2, grads ? &grads->w2 : nullptr)),
                       leaf(mlp.b2, grads ? &grads->b2 : nullptr));
}

void TypingHead::validate() const {
    if (gamma_facilitate < 0.0 || gamma_filter < 0.0) throw ConfigError("typing loss weights must be non-negative");
    if (bottleneck() > ib_mean.w1.rows()) throw ConfigError("bottleneck width must not exceed the encoder width");
}

TypingHead init_typing_head(int width, int bottleneck, std::uint64_t seed) {
    if (bottleneck < 1 || bottleneck > width) throw ConfigError("bottleneck width must lie in [1, C]");
    std::mt19937_64 rng(seed);
    TypingHead head;
    head.gp_weight = gaussian(2 * width, 1, 1.0 / std::sqrt(2.0 * width), rng);
    head.gp_bias = Matrix::Zero(1, 1);
    head.ib_mean = init_mlp(width, width, bottleneck, rng);
    head.ib_var = init_mlp(width, width, bottleneck, rng);
    return head;
}

TypingModel init_typing_model(const EncoderConfig& config, const Vocabulary& vocab, int bottleneck,
                              std::uint64_t seed) {
    TypingModel m;
    m.encoder = init_encoder(config, vocab, derive_seed(seed, "typing.encoder"));
    m.head = init_typing_head(config.width, bottleneck, derive_seed(seed, "typing.head"));
    return m;
}

// ---- pooling ----------------------------------------------------------------

RowVector span_repr(const Matrix& h, std::pair<int, int> span) {
    check_span(h.rows(), span);
    return h.middleRows(span.first, span.second - span.first + 1).colwise().mean();
}

RowVector context_repr(const Matrix& h, const std::vector<std::pair<int, int>>& spans) {
    RowVector acc = RowVector::Zero(h.cols());
    const auto idx = context_indices(h.rows(), spans);
    for (int i : idx) acc += h.row(i);
    return acc / static_cast<double>(idx.size());
}

ag::Var span_repr(ag::Var h, std::pair<int, int> span) {
    check_span(h.rows(), span);
    return ag::mean_rows(h, range_indices(span));
}

ag::Var context_repr(ag::Var h, const std::vector<std::pair<int, int>>& spans) {
    return ag::mean_rows(h, context_indices(h.rows(), spans));
}

// ---- facilitation -----------------------------------------------------------

ag::Var compatibility_scores(ag::Var spans, ag::Var contexts, ag::Var weight, ag::Var bias) {
    const Eigen::Index c = spans.cols();
    if (contexts.cols() != c || weight.rows() != 2 * c || weight.cols() != 1)
        throw InvariantError("compatibility_scores: width mismatch");
    ag::Var from_span = ag::matmul(spans, ag::slice_rows(weight, 0, c));        // B x 1
    ag::Var from_ctx = ag::matmul(contexts, ag::slice_rows(weight, c, c));      // B x 1
    ag::Var col = ag::add_row(from_span, bias);
    return ag::outer_sum(col, ag::transpose(from_ctx));
}

ag::Var infonce_from_scores(ag::Var scores, bool activations) {
    if (scores.rows() != scores.cols()) throw InvariantError("InfoNCE scores must be square");
    ag::Var positive = ag::diagonal(scores);
    ag::Var lse = ag::logsumexp_rows(scores);
    if (activations) {
        positive = ag::softplus(positive);
        lse = ag::relu(lse);
    }
    return ag::scale(ag::mean(ag::sub(positive, lse)), -1.0);
}

ag::Var infonce_loss(ag::Var spans, ag::Var contexts, ag::Var weight, ag::Var bias, int* skipped) {
    if (spans.rows() != contexts.rows()) throw InvariantError("InfoNCE needs aligned span/context batches");
    if (spans.rows() < 2) {
        if (skipped) ++*skipped;
        return spans.tape()->scalar(0.0);
    }
    return infonce_from_scores(compatibility_scores(spans, contexts, weight, bias), true);
}

// ---- bottleneck -------------------------------------------------------------

BottleneckMoments ib_moments(ag::Tape& tape, const TypingHead& head, TypingHead* grads, ag::Var h) {
    BottleneckMoments m;
    m.mean = mlp_forward(tape, head.ib_mean, grads ? &grads->ib_mean : nullptr, h);
    m.variance = ag::add_scalar(ag::softplus(mlp_forward(tape, head.ib_var, grads ? &grads->ib_var : nullptr, h)),
                                kVarianceFloor);
    return m;
}

std::pair<DiagonalGaussian, Vector> ib_forward(const RowVector& h, const TypingHead& head, Mode mode,
                                                std::uint64_t seed) {
    ag::Tape tape;
    const auto m = ib_moments(tape, head, nullptr, tape.constant(Matrix(h)));
    DiagonalGaussian g{m.mean.value().row(0).transpose(), m.variance.value().row(0).transpose()};
    if (!g.mean.allFinite() || !g.variance.allFinite()) throw NumericalError("bottleneck produced non-finite output");
    Vector t = g.mean;
    if (mode == Mode::Training) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> eps(0.0, 1.0);
        for (Eigen::Index i = 0; i < t.size(); ++i) t(i) += std::sqrt(g.variance(i)) * eps(rng);
    }
    return {std::move(g), std::move(t)};
}

double kl_loss(const DiagonalGaussian& p, const DiagonalGaussian& q) {
    if (p.mean.size() != q.mean.size() || p.variance.size() != p.mean.size() || q.variance.size() != q.mean.size())
        throw InvariantError("kl_loss: dimension mismatch");
    double kl = 0.0;
    for (Eigen::Index d = 0; d < p.mean.size(); ++d) {
        const double vp = p.variance(d), vq = q.variance(d);
        if (!(vp > 0.0) || !(vq > 0.0)) throw InvariantError("kl_loss: variances must be positive");
        const double diff = p.mean(d) - q.mean(d);
        kl += 0.5 * std::log(vq / vp) + (vp + diff * diff) / (2.0 * vq) - 0.5;
    }
    return kl;
}

ag::Var kl_rows(ag::Var mean_p, ag::Var var_p, ag::Var mean_q, ag::Var var_q) {
    ag::Var log_ratio = ag::scale(ag::sub(ag::log(var_q), ag::log(var_p)), 0.5);
    ag::Var quad = ag::divide(ag::add(var_p, ag::square(ag::sub(mean_p, mean_q))), ag::scale(var_q, 2.0));
    return ag::sum_rows(ag::add_scalar(ag::add(log_ratio, quad), -0.5));
}

// ---- prototypes -------------------------------------------------------------

Prototypes class_prototypes(const std::vector<std::pair<RowVector, std::string>>& support) {
    std::map<std::string, std::pair<RowVector, int>> acc;
    for (const auto& [v, type] : support) {
        auto it = acc.find(type);
        if (it == acc.end())
            acc.emplace(type, std::make_pair(v, 1));
        else {
            it->second.first += v;
            ++it->second.second;
        }
    }
    Prototypes out;
    for (auto& [type, sum_count] : acc) out.emplace(type, sum_count.first / static_cast<double>(sum_count.second));
    return out;
}

namespace {

double distance(const RowVector& a, const RowVector& b, Distance d) {
    if (d == Distance::SquaredEuclidean) return (a - b).squaredNorm();
    const double denom = std::max(a.norm() * b.norm(), 1e-12);
    return 1.0 - a.dot(b) / denom;
}

} // namespace

std::vector<double> proto_distribution(const RowVector& h, const Prototypes& prototypes, Distance d) {
    if (prototypes.empty()) throw InvariantError("no prototypes");
    std::vector<double> logits;
    for (const auto& [type, c] : prototypes) logits.push_back(-distance(c, h, d));
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& v : logits) {
        v = std::exp(v - mx);
        z += v;
    }
    for (double& v : logits) v /= z;
    return logits;
}

double proto_loss(const std::vector<std::pair<RowVector, std::string>>& query, const Prototypes& prototypes,
                  Distance d) {
    double loss = 0.0;
    for (const auto& [h, type] : query) {
        auto it = prototypes.find(type);
        if (it == prototypes.end()) throw InvariantError("query type '" + type + "' has no prototype");
        const auto p = proto_distribution(h, prototypes, d);
        loss -= std::log(p[static_cast<size_t>(std::distance(prototypes.begin(), it))]);
    }
    return loss;
}

std::vector<std::string> classify_spans(const std::vector<RowVector>& spans, const Prototypes& prototypes,
                                        Distance d) {
    if (prototypes.empty()) throw InvariantError("no prototypes");
    std::vector<std::string> out;
    out.reserve(spans.size());
    for (const auto& h : spans) {
        // argmax of softmax(-d) is argmin of d; map order makes ties pick the smallest type
        const std::string* best = nullptr;
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& [type, c] : prototypes) {
            const double dist = distance(c, h, d);
            if (dist < best_d) {
                best_d = dist;
                best = &type;
            }
        }
        out.push_back(best ? *best : prototypes.begin()->first);
    }
    return out;
}

ag::Var proto_loss(ag::Var query, const std::vector<int>& gold, ag::Var prototypes, Distance d) {
    ag::Var logits;
    if (d == Distance::SquaredEuclidean)
        logits = ag::scale(ag::squared_distance(query, prototypes), -1.0);
    else
        logits = ag::add_scalar(
            ag::matmul(ag::normalize_rows(query), ag::transpose(ag::normalize_rows(prototypes))), -1.0);
    return ag::sum(ag::cross_entropy_rows(logits, gold));
}

// ---- stage loss -------------------------------------------------------------

namespace {

struct PooledSpans {
    std::vector<ag::Var> spans;
    std::vector<ag::Var> contexts;
    std::vector<std::string> types;
};

PooledSpans pool(ag::Tape& tape, const TypingModel& model, TypingModel* grads, std::span<const Sentence> sentences,
                 Mode mode, std::mt19937_64* rng, bool with_context) {
    PooledSpans out;
    for (const auto& s : sentences) {
        if (s.spans.empty()) continue;
        ag::Var h = encode(tape, model.encoder, grads ? &grads->encoder : nullptr, s.tokens, mode, rng);
        std::vector<std::pair<int, int>> spans;
        for (const auto& sp : s.spans) spans.push_back(clip({sp.start, sp.end}, h.rows()));
        ag::Var ctx;
        if (with_context) ctx = context_repr(h, spans);
        for (size_t i = 0; i < spans.size(); ++i) {
            out.spans.push_back(span_repr(h, spans[i]));
            out.types.push_back(s.spans[i].type);
            if (with_context) out.contexts.push_back(ctx);
        }
    }
    return out;
}

} // namespace

TypingLoss typing_stage_loss(ag::Tape& tape, const TypingModel& model, TypingModel* grads,
                             std::span<const Sentence> prototype_sentences, std::span<const Sentence> target_sentences,
                             Mode mode, std::mt19937_64* rng) {
    model.head.validate();
    const bool same = prototype_sentences.data() == target_sentences.data() &&
                      prototype_sentences.size() == target_sentences.size();
    PooledSpans target = pool(tape, model, grads, target_sentences, mode, rng, true);
    PooledSpans support = same ? target : pool(tape, model, grads, prototype_sentences, mode, rng, false);
    if (support.spans.empty()) throw InvariantError("no support spans for prototypes");
    if (target.spans.empty()) throw InvariantError("no target spans for the typing loss");

    std::map<std::string, std::vector<ag::Var>> by_type;
    for (size_t i = 0; i < support.spans.size(); ++i) by_type[support.types[i]].push_back(support.spans[i]);
    std::vector<ag::Var> proto_rows;
    std::map<std::string, int> type_index;
    for (auto& [type, rows] : by_type) {
        type_index.emplace(type, static_cast<int>(proto_rows.size()));
        ag::Var stacked = rows.size() == 1 ? rows[0] : ag::concat_rows(rows);
        std::vector<int> all(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) all[i] = static_cast<int>(i);
        proto_rows.push_back(rows.size() == 1 ? rows[0] : ag::mean_rows(stacked, all));
    }
    ag::Var protos = proto_rows.size() == 1 ? proto_rows[0] : ag::concat_rows(proto_rows);

    std::vector<int> gold;
    for (const auto& t : target.types) {
        auto it = type_index.find(t);
        if (it == type_index.end()) throw InvariantError("target type '" + t + "' has no support prototype");
        gold.push_back(it->second);
    }
    ag::Var q = target.spans.size() == 1 ? target.spans[0] : ag::concat_rows(target.spans);
    ag::Var c = target.contexts.size() == 1 ? target.contexts[0] : ag::concat_rows(target.contexts);

    TypingLoss out;
    out.proto = proto_loss(q, gold, protos, model.head.distance);
    out.total = out.proto;
    const TypingHead& hd = model.head;
    TypingHead* hg = grads ? &grads->head : nullptr;
    if (hd.gamma_facilitate > 0.0) {
        ag::Var w = tape.param(hd.gp_weight, hg ? &hg->gp_weight : nullptr);
        ag::Var b = tape.param(hd.gp_bias, hg ? &hg->gp_bias : nullptr);
        out.facilitate = infonce_loss(q, c, w, b, &out.skipped_infonce);
        out.total = ag::add(out.total, ag::scale(out.facilitate, hd.gamma_facilitate));
    } else {
        out.facilitate = tape.scalar(0.0);
    }
    if (hd.gamma_filter > 0.0) {
        const auto ms = ib_moments(tape, hd, hg, q);
        const auto mc = ib_moments(tape, hd, hg, c);
        out.filter = ag::mean(kl_rows(ms.mean, ms.variance, mc.mean, mc.variance));
        out.total = ag::add(out.total, ag::scale(out.filter, hd.gamma_filter));
    } else {
        out.filter = tape.scalar(0.0);
    }
    return out;
}

double typing_loss_value(const TypingModel& model, std::span<const Sentence> prototype_sentences,
                         std::span<const Sentence> target_sentences) {
    ag::Tape tape;
    return typing_stage_loss(tape, model, nullptr, prototype_sentences, target_sentences, Mode::Inference, nullptr)
        .total.scalar();
}

double typing_loss_fixed(const TypingModel& model, const Sentence& sentence, const Prototypes& prototypes) {
    if (sentence.spans.empty()) return 0.0;
    if (prototypes.empty()) throw InvariantError("no prototypes");
    ag::Tape tape;
    PooledSpans pooled = pool(tape, model, nullptr, std::span<const Sentence>(&sentence, 1), Mode::Inference,
                              nullptr, true);
    std::vector<ag::Var> rows;
    std::map<std::string, int> index;
    for (const auto& [type, c] : prototypes) {
        index.emplace(type, static_cast<int>(rows.size()));
        rows.push_back(tape.constant(Matrix(c)));
    }
    std::vector<int> gold;
    for (const auto& t : pooled.types) {
        auto it = index.find(t);
        if (it == index.end()) throw InvariantError("type '" + t + "' has no prototype");
        gold.push_back(it->second);
    }
    ag::Var q = pooled.spans.size() == 1 ? pooled.spans[0] : ag::concat_rows(pooled.spans);
    ag::Var c = pooled.contexts.size() == 1 ? pooled.contexts[0] : ag::concat_rows(pooled.contexts);
    const TypingHead& hd = model.head;
    double loss = proto_loss(q, gold, rows.size() == 1 ? rows[0] : ag::concat_rows(rows), hd.distance).scalar();
    if (hd.gamma_facilitate > 0.0)
        loss += hd.gamma_facilitate *
                infonce_loss(q, c, tape.param(hd.gp_weight, nullptr), tape.param(hd.gp_bias, nullptr)).scalar();
    if (hd.gamma_filter > 0.0) {
        const auto ms = ib_moments(tape, hd, nullptr, q);
        const auto mc = ib_moments(tape, hd, nullptr, c);
        loss += hd.gamma_filter * ag::mean(kl_rows(ms.mean, ms.variance, mc.mean, mc.variance)).scalar();
    }
    return loss;
}

std::vector<RowVector> span_representations(const TypingModel& model, std::span<const std::string> tokens,
                                            const std::vector<std::pair<int, int>>& spans) {
    if (spans.empty()) return {};
    const Matrix h = encode(model.encoder, tokens);
    std::vector<RowVector> out;
    out.reserve(spans.size());
    for (const auto& sp : spans) out.push_back(span_repr(h, clip(sp, h.rows())));
    return out;
}

Prototypes support_prototypes(const TypingModel& model, std::span<const Sentence> support) {
    std::vector<std::pair<RowVector, std::string>> reps;
    for (const auto& s : support) {
        if (s.spans.empty()) continue;
        std::vector<std::pair<int, int>> spans;
        for (const auto& sp : s.spans) spans.emplace_back(sp.start, sp.end);
        const auto r = span_representations(model, s.tokens, spans);
        for (size_t i = 0; i < r.size(); ++i) reps.emplace_back(r[i], s.spans[i].type);
    }
    return class_prototypes(reps);
}

void save_typing_model(std::ostream& out, const TypingModel& model) {
    save_encoder(out, model.encoder);
    CheckpointWriter w(out, "typing_head");
    w.i64(model.encoder.config.width);
    w.i64(model.head.bottleneck());
    w.f64(model.head.gamma_facilitate);
    w.f64(model.head.gamma_filter);
    w.u64(model.head.distance == Distance::Cosine ? 1 : 0);
    const_cast<TypingHead&>(model.head).visit([&](const std::string& name, Matrix& m) { w.matrix(name, m); });
}

TypingModel load_typing_model(std::istream& in) {
    TypingModel m;
    m.encoder = load_encoder(in);
    CheckpointReader r(in, "typing_head");
    const auto width = r.i64();
    const auto bottleneck = r.i64();
    if (width != m.encoder.config.width || bottleneck < 1 || bottleneck > width)
        throw Error("typing checkpoint head shape inconsistent with encoder");
    m.head = init_typing_head(static_cast<int>(width), static_cast<int>(bottleneck), 0);
    m.head.gamma_facilitate = r.f64();
    m.head.gamma_filter = r.f64();
    m.head.distance = r.u64() != 0 ? Distance::Cosine : Distance::SquaredEuclidean;
    m.head.visit([&](const std::string& name, Matrix& mat) { r.matrix(name, mat); });
    return m;
}

} // namespace bdcp
