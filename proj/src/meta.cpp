#include "bdcp/meta.hpp"

#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"

#include <algorithm>
#include <map>
#include <random>

namespace bdcp {

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(what);
    };
    require(lr_span >= 0.0 && lr_typing >= 0.0, "learning rates must be non-negative");
    require(inner_steps >= 0 && inner_lr >= 0.0, "inner steps and inner learning rate must be non-negative");
    require(inner_clip >= 0.0, "inner gradient clip must be non-negative");
    require(batch_size >= 1, "batch size must be positive");
    require(weight_decay >= 0.0, "weight decay must be non-negative");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
            "Adam betas must lie in [0, 1)");
    require(adam_eps > 0.0, "Adam epsilon must be positive");
    require(n_way >= 1 && k_shot >= 1 && k_query >= 1, "n-way, k-shot and k-query must be positive");
    require(train_episodes >= 0 && eval_episodes >= 0, "episode counts must be non-negative");
    require(width >= 1 && blocks >= 0 && heads >= 1 && width % heads == 0, "width must be a multiple of heads");
    require(ffn_width >= 1, "ffn width must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    require(max_length >= 1, "max length must be positive");
    require(embedding_scale > 0.0, "embedding scale must be positive");
    require(components >= 1, "components per class must be positive");
    require(tau > 0.0, "tau must be positive");
    require(margin >= 0.0 && margin < 1.5707963267948966, "margin must lie in [0, pi/2)");
    require(alpha >= 0.0, "alpha must be non-negative");
    require(gamma1 >= 0.0 && gamma2 >= 0.0 && gamma3 >= 0.0 && gamma4 >= 0.0, "loss weights must be non-negative");
    require(bottleneck >= 1 && bottleneck <= width, "bottleneck must lie in [1, width]");
    require(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
}

EncoderConfig TrainConfig::encoder() const {
    EncoderConfig c;
    c.width = width;
    c.blocks = blocks;
    c.heads = heads;
    c.ffn_width = ffn_width;
    c.dropout = dropout;
    c.max_length = max_length;
    c.embedding_scale = embedding_scale;
    return c;
}

SpanModel make_span_model(const TrainConfig& config, const Vocabulary& vocab) {
    config.validate();
    SpanModel m = init_span_model(config.encoder(), vocab, config.components, config.seed);
    m.head.margin = config.margin;
    m.head.tau = config.tau;
    m.head.alpha = config.alpha;
    m.head.gamma_assign = config.gamma1;
    m.head.gamma_diversity = config.gamma2;
    m.head.centroid_decoding = config.centroid_decoding;
    return m;
}

TypingModel make_typing_model(const TrainConfig& config, const Vocabulary& vocab) {
    config.validate();
    TypingModel m = init_typing_model(config.encoder(), vocab, config.bottleneck, config.seed);
    m.head.gamma_facilitate = config.gamma3;
    m.head.gamma_filter = config.gamma4;
    m.head.distance = config.distance;
    return m;
}

nlohmann::json metrics_to_json(const StepMetrics& m) {
    return {{"stage", m.stage},
            {"step", m.step},
            {"support_loss", m.support_loss},
            {"adapted_support_loss", m.adapted_support_loss},
            {"query_loss", m.query_loss},
            {"grad_norm", m.grad_norm},
            {"skipped_infonce", m.skipped_infonce}};
}

// ---- per-stage loss adapters --------------------------------------------------

namespace {

struct Gradient {
    double loss = 0.0;
    int skipped = 0;
};

// Mean of the chunk losses (chunks of at most batch_size sentences), weighted
// by chunk size; the gradient of that mean lands in `grads`.
Gradient span_gradient(const SpanModel& model, SpanModel& grads, const std::vector<Sentence>& sentences,
                       int batch_size, std::mt19937_64& rng) {
    Gradient out;
    const size_t n = sentences.size();
    for (size_t lo = 0; lo < n; lo += static_cast<size_t>(batch_size)) {
        const size_t len = std::min(n - lo, static_cast<size_t>(batch_size));
        const double w = static_cast<double>(len) / static_cast<double>(n);
        ag::Tape tape;
        SpanModel chunk = zeros_like(model);
        SpanLoss l = span_batch_loss(tape, model, &chunk, std::span<const Sentence>(sentences).subspan(lo, len),
                                     Mode::Training, &rng);
        tape.backward(l.total);
        axpy(grads, w, chunk);
        out.loss += w * l.total.scalar();
    }
    return out;
}

// Typing batches need prototypes, so the whole support set is always one
// prototype source; only the targets are chunked.
Gradient typing_gradient(const TypingModel& model, TypingModel& grads, const std::vector<Sentence>& prototypes,
                         const std::vector<Sentence>& targets, int batch_size, std::mt19937_64& rng) {
    Gradient out;
    const bool same = &prototypes == &targets;
    const size_t n = targets.size();
    if (same && n <= static_cast<size_t>(batch_size)) {
        ag::Tape tape;
        TypingLoss l = typing_stage_loss(tape, model, &grads, prototypes, targets, Mode::Training, &rng);
        tape.backward(l.total);
        return {l.total.scalar(), l.skipped_infonce};
    }
    for (size_t lo = 0; lo < n; lo += static_cast<size_t>(batch_size)) {
        const size_t len = std::min(n - lo, static_cast<size_t>(batch_size));
        std::vector<Sentence> chunk_targets(targets.begin() + static_cast<long>(lo),
                                            targets.begin() + static_cast<long>(lo + len));
        if (std::all_of(chunk_targets.begin(), chunk_targets.end(), [](const Sentence& s) { return s.spans.empty(); }))
            continue;
        const double w = static_cast<double>(len) / static_cast<double>(n);
        ag::Tape tape;
        TypingModel chunk = zeros_like(model);
        TypingLoss l = typing_stage_loss(tape, model, &chunk, prototypes, chunk_targets, Mode::Training, &rng);
        tape.backward(l.total);
        axpy(grads, w, chunk);
        out.loss += w * l.total.scalar();
        out.skipped += l.skipped_infonce;
    }
    return out;
}

bool has_spans(const std::vector<Sentence>& s) {
    return std::any_of(s.begin(), s.end(), [](const Sentence& x) { return !x.spans.empty(); });
}

void after_update(SpanModel& m) { m.bank.project(); }
void after_update(TypingModel&) {}

Gradient stage_gradient(const SpanModel& m, SpanModel& g, const std::vector<Sentence>& support,
                        const std::vector<Sentence>* query, int batch, std::mt19937_64& rng) {
    return span_gradient(m, g, query ? *query : support, batch, rng);
}

Gradient stage_gradient(const TypingModel& m, TypingModel& g, const std::vector<Sentence>& support,
                        const std::vector<Sentence>* query, int batch, std::mt19937_64& rng) {
    return typing_gradient(m, g, support, query ? *query : support, batch, rng);
}

template <class Model>
Model adapt(const Model& model, const std::vector<Sentence>& support, const TrainConfig& config,
            std::mt19937_64& rng, double* first_loss, double* last_loss, int* skipped) {
    Model adapted = model;
    for (int step = 0; step < config.inner_steps; ++step) {
        Model grads = zeros_like(adapted);
        const Gradient g = stage_gradient(adapted, grads, support, nullptr, config.batch_size, rng);
        if (!std::isfinite(g.loss) || !all_finite(grads)) throw NumericalError("non-finite support loss");
        if (step == 0 && first_loss) *first_loss = g.loss;
        if (last_loss) *last_loss = g.loss;
        if (skipped) *skipped += g.skipped;
        double scale = config.inner_lr;
        const double norm = std::sqrt(squared_norm(grads));
        if (config.inner_clip > 0.0 && norm > config.inner_clip) scale *= config.inner_clip / norm;
        axpy(adapted, -scale, grads);
        after_update(adapted);
    }
    return adapted;
}

template <class Model>
TrainResult<Model> meta_train(const char* stage, const Model& initial, const std::vector<Episode>& episodes,
                              const TrainConfig& config, double lr, const MetricsCallback& on_step) {
    config.validate();
    TrainResult<Model> result{initial, {}, false, {}};
    AdamW<Model> opt(initial, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
    for (size_t e = 0; e < episodes.size(); ++e) {
        const Episode& ep = episodes[e];
        if (ep.support.empty() || ep.query.empty() || !has_spans(ep.support))
            throw InvariantError("training episode " + std::to_string(e) + " lacks support or query sentences");
        std::mt19937_64 rng(derive_seed(derive_seed(config.seed, stage), static_cast<std::uint64_t>(e)));
        StepMetrics m;
        m.stage = stage;
        m.step = static_cast<int>(e) + 1;
        try {
            Model adapted = adapt(result.model, ep.support, config, rng, &m.support_loss, &m.adapted_support_loss,
                                  &m.skipped_infonce);
            Model grads = zeros_like(adapted);
            const Gradient q = stage_gradient(adapted, grads, ep.support, &ep.query, config.batch_size, rng);
            m.query_loss = q.loss;
            m.skipped_infonce += q.skipped;
            m.grad_norm = std::sqrt(squared_norm(grads));
            if (!std::isfinite(q.loss) || !std::isfinite(m.grad_norm)) throw NumericalError("non-finite query loss");
            Model next = result.model;
            opt.step(next, grads, lr);
            after_update(next);
            if (!all_finite(next)) throw NumericalError("non-finite parameters after the outer update");
            result.model = std::move(next);
        } catch (const NumericalError& ex) {
            result.diverged = true;
            result.message = std::string(stage) + " diverged at step " + std::to_string(m.step) + ": " + ex.what();
            return result;
        }
        result.history.push_back(m);
        if (on_step) on_step(m);
    }
    return result;
}

} // namespace

TrainResult<SpanModel> train_span_stage(const SpanModel& initial, const std::vector<Episode>& episodes,
                                        const TrainConfig& config, const MetricsCallback& on_step) {
    initial.head.validate();
    return meta_train("span", initial, episodes, config, config.lr_span, on_step);
}

TrainResult<TypingModel> train_typing_stage(const TypingModel& initial, const SpanModel& stage1,
                                            const std::vector<Episode>& episodes, const TrainConfig& config,
                                            const MetricsCallback& on_step) {
    (void)stage1; // spans come from gold annotations during training
    initial.head.validate();
    return meta_train("typing", initial, episodes, config, config.lr_typing, on_step);
}

SpanModel finetune_on_support(const SpanModel& model, const std::vector<Sentence>& support, const TrainConfig& config,
                              std::uint64_t seed) {
    if (support.empty() || config.inner_steps == 0) return model;
    std::mt19937_64 rng(seed);
    return adapt(model, support, config, rng, nullptr, nullptr, nullptr);
}

TypingModel finetune_on_support(const TypingModel& model, const std::vector<Sentence>& support,
                                const TrainConfig& config, std::uint64_t seed, int* skipped) {
    if (!has_spans(support) || config.inner_steps == 0) return model;
    std::mt19937_64 rng(seed);
    return adapt(model, support, config, rng, nullptr, nullptr, skipped);
}

// ---- scoring ------------------------------------------------------------------

Scores micro_f1(const std::vector<Mention>& predicted, const std::vector<Mention>& gold) {
    std::map<Mention, long> remaining;
    for (const auto& g : gold) ++remaining[g];
    Scores s;
    s.predicted = static_cast<long>(predicted.size());
    s.gold = static_cast<long>(gold.size());
    for (const auto& p : predicted) {
        auto it = remaining.find(p);
        if (it != remaining.end() && it->second > 0) {
            --it->second;
            ++s.true_positive;
        }
    }
    s.precision = s.predicted ? static_cast<double>(s.true_positive) / static_cast<double>(s.predicted) : 0.0;
    s.recall = s.gold ? static_cast<double>(s.true_positive) / static_cast<double>(s.gold) : 0.0;
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

const ScenarioReport* EvalReport::find(const std::string& name) const {
    for (const auto& s : scenarios)
        if (s.name == name) return &s;
    return nullptr;
}

// ---- victim and attack ----------------------------------------------------------

std::vector<EntitySpan> predict_entities(const SpanModel& span, const TypingModel& typing,
                                         const Prototypes& prototypes, const std::vector<std::string>& tokens) {
    const auto spans = predict_spans(span, tokens);
    std::vector<EntitySpan> out;
    if (spans.empty()) return out;
    const auto types = classify_spans(span_representations(typing, tokens, spans), prototypes, typing.head.distance);
    for (size_t i = 0; i < spans.size(); ++i) out.push_back({spans[i].first, spans[i].second, types[i]});
    return out;
}

ModelVictim::ModelVictim(const SpanModel& span, const TypingModel& typing, Prototypes prototypes)
    : span_(span), typing_(typing), prototypes_(std::move(prototypes)) {
    if (prototypes_.empty()) throw InvariantError("victim needs at least one prototype");
}

double ModelVictim::loss(const Sentence& sentence) const {
    if (sentence.tokens.empty()) return 0.0;
    return span_loss_value(span_, std::span<const Sentence>(&sentence, 1)) +
           typing_loss_fixed(typing_, sentence, prototypes_);
}

std::vector<EntitySpan> ModelVictim::predict(const std::vector<std::string>& tokens) const {
    return predict_entities(span_, typing_, prototypes_, tokens);
}

AttackedEpisode attack_episode(const Episode& episode, const SpanModel& span, const TypingModel& typing,
                               const CandidateSource& candidates, double rho, std::uint64_t seed) {
    const ModelVictim victim(span, typing, support_prototypes(typing, episode.support));
    AttackedEpisode out;
    out.support = attack_corpus(victim, episode.support, candidates, rho, derive_seed(seed, "support"));
    out.query = attack_corpus(victim, episode.query, candidates, rho, derive_seed(seed, "query"));
    out.episode = episode;
    for (size_t i = 0; i < out.support.size(); ++i) out.episode.support[i] = out.support[i].perturbed;
    for (size_t i = 0; i < out.query.size(); ++i) out.episode.query[i] = out.query[i].perturbed;
    return out;
}

nlohmann::json attacked_episode_to_json(const AttackedEpisode& a) {
    nlohmann::json j = episode_to_json(a.episode);
    nlohmann::json sup = nlohmann::json::array(), qry = nlohmann::json::array();
    for (const auto& s : a.support) sup.push_back(adversarial_to_json(s));
    for (const auto& s : a.query) qry.push_back(adversarial_to_json(s));
    j["attack"] = {{"support", sup}, {"query", qry}};
    return j;
}

// ---- evaluation -----------------------------------------------------------------

ScenarioReport evaluate_scenario(const std::string& name, const std::vector<Episode>& episodes,
                                 const SpanModel& span, const TypingModel& typing, const TrainConfig& config) {
    ScenarioReport rep;
    rep.name = name;
    rep.component_usage.assign(static_cast<size_t>(span.bank.classes),
                               std::vector<long>(static_cast<size_t>(span.bank.per_class), 0));
    std::vector<Mention> pred_typed, gold_typed, pred_span, gold_span;
    long gold_spans_total = 0, gold_spans_correct = 0;
    size_t sentence_id = 0;
    for (size_t e = 0; e < episodes.size(); ++e) {
        const Episode& ep = episodes[e];
        const std::uint64_t es = derive_seed(derive_seed(config.seed, "finetune"), static_cast<std::uint64_t>(e));
        const SpanModel span_ft = finetune_on_support(span, ep.support, config, derive_seed(es, "span"));
        const TypingModel typ_ft = finetune_on_support(typing, ep.support, config, derive_seed(es, "typing"),
                                                        &rep.skipped_infonce);
        const Prototypes protos = support_prototypes(typ_ft, ep.support);
        std::vector<Mention> ep_pred_typed, ep_gold_typed, ep_pred_span, ep_gold_span;
        for (const auto& q : ep.query) {
            const size_t id = sentence_id++;
            for (const auto& g : q.spans) {
                ep_gold_typed.push_back({id, g.start, g.end, g.type});
                ep_gold_span.push_back({id, g.start, g.end, {}});
            }
            if (q.tokens.empty()) continue;
            const auto spans = predict_spans(span_ft, q.tokens);
            if (!spans.empty() && !protos.empty()) {
                const auto types =
                    classify_spans(span_representations(typ_ft, q.tokens, spans), protos, typ_ft.head.distance);
                for (size_t i = 0; i < spans.size(); ++i) {
                    ep_pred_typed.push_back({id, spans[i].first, spans[i].second, types[i]});
                    ep_pred_span.push_back({id, spans[i].first, spans[i].second, {}});
                }
            } else {
                for (const auto& [s, t] : spans) ep_pred_span.push_back({id, s, t, {}});
            }
            if (!q.spans.empty() && !protos.empty()) {
                std::vector<std::pair<int, int>> gs;
                for (const auto& g : q.spans) gs.emplace_back(g.start, g.end);
                const auto types =
                    classify_spans(span_representations(typ_ft, q.tokens, gs), protos, typ_ft.head.distance);
                for (size_t i = 0; i < gs.size(); ++i) gold_spans_correct += types[i] == q.spans[i].type ? 1 : 0;
                gold_spans_total += static_cast<long>(gs.size());
            }
        }
        const auto usage = component_usage(span_ft, ep.query);
        for (size_t k = 0; k < usage.size(); ++k)
            for (size_t j = 0; j < usage[k].size(); ++j) rep.component_usage[k][j] += usage[k][j];
        rep.episodes.push_back({e, micro_f1(ep_pred_typed, ep_gold_typed), micro_f1(ep_pred_span, ep_gold_span)});
        pred_typed.insert(pred_typed.end(), ep_pred_typed.begin(), ep_pred_typed.end());
        gold_typed.insert(gold_typed.end(), ep_gold_typed.begin(), ep_gold_typed.end());
        pred_span.insert(pred_span.end(), ep_pred_span.begin(), ep_pred_span.end());
        gold_span.insert(gold_span.end(), ep_gold_span.begin(), ep_gold_span.end());
    }
    rep.typed = micro_f1(pred_typed, gold_typed);
    rep.span_only = micro_f1(pred_span, gold_span);
    rep.gold_span_typing_accuracy =
        gold_spans_total ? static_cast<double>(gold_spans_correct) / static_cast<double>(gold_spans_total) : 0.0;
    return rep;
}

EvalReport evaluate(const std::vector<Episode>& episodes, const SpanModel& span, const TypingModel& typing,
                    const TrainConfig& config, const CandidateSource* candidates) {
    config.validate();
    EvalReport report;
    report.rho = config.rho;
    report.seed = config.seed;
    report.gammas = {span.head.gamma_assign, span.head.gamma_diversity, typing.head.gamma_facilitate,
                     typing.head.gamma_filter};
    report.n_way = config.n_way;
    report.k_shot = config.k_shot;
    report.scenarios.push_back(evaluate_scenario("clean", episodes, span, typing, config));
    if (!candidates) return report;

    std::vector<Episode> attacked;
    AttackCounters counters;
    const std::uint64_t as = derive_seed(config.seed, "attack");
    for (size_t e = 0; e < episodes.size(); ++e) {
        AttackedEpisode a =
            attack_episode(episodes[e], span, typing, *candidates, config.rho, derive_seed(as, static_cast<std::uint64_t>(e)));
        for (const auto* list : {&a.support, &a.query})
            for (const auto& s : *list) {
                ++counters.sentences;
                counters.successes += s.success ? 1 : 0;
                counters.substitutions += static_cast<long>(s.substitutions.size());
                counters.errors += s.error.empty() ? 0 : 1;
            }
        attacked.push_back(std::move(a.episode));
    }
    ScenarioReport rep = evaluate_scenario("attacked", attacked, span, typing, config);
    rep.attack = counters;
    report.scenarios.push_back(std::move(rep));
    return report;
}

// ---- report serialisation -------------------------------------------------------

namespace {

nlohmann::json scores_json(const Scores& s) {
    return {{"precision", s.precision}, {"recall", s.recall},     {"f1", s.f1},
            {"tp", s.true_positive},    {"predicted", s.predicted}, {"gold", s.gold}};
}

Scores scores_from(const nlohmann::json& j) {
    Scores s;
    s.precision = j.at("precision").get<double>();
    s.recall = j.at("recall").get<double>();
    s.f1 = j.at("f1").get<double>();
    s.true_positive = j.at("tp").get<long>();
    s.predicted = j.at("predicted").get<long>();
    s.gold = j.at("gold").get<long>();
    return s;
}

} // namespace

nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json scen = nlohmann::json::array();
    for (const auto& s : report.scenarios) {
        nlohmann::json eps = nlohmann::json::array();
        for (const auto& e : s.episodes)
            eps.push_back({{"episode", e.episode}, {"typed", scores_json(e.typed)}, {"span_only", scores_json(e.span_only)}});
        scen.push_back({{"name", s.name},
                        {"typed", scores_json(s.typed)},
                        {"span_only", scores_json(s.span_only)},
                        {"gold_span_typing_accuracy", s.gold_span_typing_accuracy},
                        {"episodes", eps},
                        {"component_usage", s.component_usage},
                        {"skipped_infonce", s.skipped_infonce},
                        {"attack",
                         {{"sentences", s.attack.sentences},
                          {"successes", s.attack.successes},
                          {"substitutions", s.attack.substitutions},
                          {"errors", s.attack.errors}}}});
    }
    return {{"scenarios", scen},      {"rho", report.rho},       {"victim", report.victim}, {"seed", report.seed},
            {"gammas", report.gammas}, {"n_way", report.n_way}, {"k_shot", report.k_shot}};
}

EvalReport report_from_json(const nlohmann::json& j) {
    try {
        EvalReport r;
        r.rho = j.at("rho").get<double>();
        r.victim = j.at("victim").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.gammas = j.at("gammas").get<std::array<double, 4>>();
        r.n_way = j.at("n_way").get<int>();
        r.k_shot = j.at("k_shot").get<int>();
        for (const auto& s : j.at("scenarios")) {
            ScenarioReport rep;
            rep.name = s.at("name").get<std::string>();
            rep.typed = scores_from(s.at("typed"));
            rep.span_only = scores_from(s.at("span_only"));
            rep.gold_span_typing_accuracy = s.at("gold_span_typing_accuracy").get<double>();
            for (const auto& e : s.at("episodes"))
                rep.episodes.push_back(
                    {e.at("episode").get<size_t>(), scores_from(e.at("typed")), scores_from(e.at("span_only"))});
            rep.component_usage = s.at("component_usage").get<std::vector<std::vector<long>>>();
            rep.skipped_infonce = s.at("skipped_infonce").get<int>();
            const auto& a = s.at("attack");
            rep.attack = {a.at("sentences").get<long>(), a.at("successes").get<long>(),
                          a.at("substitutions").get<long>(), a.at("errors").get<long>()};
            r.scenarios.push_back(std::move(rep));
        }
        return r;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(0, std::string("malformed report: ") + ex.what());
    }
}

} // namespace bdcp
