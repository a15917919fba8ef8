// Serial two-stage episodic training, support finetuning and evaluation.
//
// Both stages use first-order MAML: a private clone of the parameters takes
// `inner_steps` SGD steps on the support loss, the query loss is
// differentiated at the adapted point, and that gradient drives an AdamW
// update of the shared parameters.

#pragma once

#include "bdcp/attack.hpp"
#include "bdcp/corpus.hpp"
#include "bdcp/params.hpp"
#include "bdcp/span_detect.hpp"
#include "bdcp/typing.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace bdcp {

struct TrainConfig {
    // optimisation
    double lr_span = 3e-5;
    double lr_typing = 1e-4;
    int inner_steps = 3;
    double inner_lr = 1e-2;
    double inner_clip = 1.0; // global gradient-norm cap for inner steps, 0 disables
    int batch_size = 64;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;

    // episodes
    int n_way = 5;
    int k_shot = 1;
    int k_query = 1;
    int train_episodes = 200;
    int eval_episodes = 20;

    // encoder
    int width = 32;
    int blocks = 2;
    int heads = 2;
    int ffn_width = 64;
    double dropout = 0.2;
    int max_length = 128;
    double embedding_scale = 0.3;

    // span detection
    int components = 15; // N_c
    double tau = 0.025;
    double margin = 0.01;
    double alpha = 0.2;
    double gamma1 = 0.1; // assignment
    double gamma2 = 0.1; // diversity
    bool centroid_decoding = false;

    // entity typing
    int bottleneck = 16;
    double gamma3 = 1e-3; // facilitation
    double gamma4 = 1e-5; // filter
    Distance distance = Distance::SquaredEuclidean;

    // attack
    double rho = 0.4;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
    EncoderConfig encoder() const;
};

SpanModel make_span_model(const TrainConfig& config, const Vocabulary& vocab);
TypingModel make_typing_model(const TrainConfig& config, const Vocabulary& vocab);

/// Decoupled-weight-decay Adam over a parameter struct.
template <ParameterSet P>
class AdamW {
public:
    AdamW(const P& like, double beta1, double beta2, double eps, double weight_decay)
        : m_(zeros_like(like)), v_(zeros_like(like)), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    void step(P& params, const P& grads, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        auto p = param_list(params);
        auto g = param_list(grads);
        auto m = param_list(m_);
        auto v = param_list(v_);
        for (size_t i = 0; i < p.size(); ++i) {
            *m[i] = b1_ * *m[i] + (1.0 - b1_) * *g[i];
            *v[i] = b2_ * *v[i] + (1.0 - b2_) * g[i]->cwiseProduct(*g[i]);
            *p[i] *= 1.0 - lr * wd_;
            *p[i] -= lr * ((*m[i] / c1).array() / ((*v[i] / c2).array().sqrt() + eps_)).matrix();
        }
    }

    long steps() const { return t_; }

private:
    P m_, v_;
    double b1_, b2_, eps_, wd_;
    long t_ = 0;
};

struct StepMetrics {
    std::string stage;
    int step = 0;
    double support_loss = 0.0; // before adaptation
    double adapted_support_loss = 0.0;
    double query_loss = 0.0;
    double grad_norm = 0.0;
    int skipped_infonce = 0;
};

nlohmann::json metrics_to_json(const StepMetrics& m);

template <class Model>
struct TrainResult {
    Model model;
    std::vector<StepMetrics> history;
    bool diverged = false;
    std::string message; // reason for stopping early
};

using MetricsCallback = std::function<void(const StepMetrics&)>;

/// Meta-trains stage 1. Each episode needs non-empty support and query sets.
/// On a non-finite loss or parameter the run stops and the last finite
/// parameters are returned with `diverged` set.
TrainResult<SpanModel> train_span_stage(const SpanModel& initial, const std::vector<Episode>& episodes,
                                        const TrainConfig& config, const MetricsCallback& on_step = {});

/// Meta-trains stage 2 with gold spans. `stage1` is taken read-only to make
/// the serial order explicit; typing never touches it.
TrainResult<TypingModel> train_typing_stage(const TypingModel& initial, const SpanModel& stage1,
                                            const std::vector<Episode>& episodes, const TrainConfig& config,
                                            const MetricsCallback& on_step = {});

/// Clones and adapts with `inner_steps` SGD steps on the support loss. The
/// seed feeds dropout; the inputs are never modified.
SpanModel finetune_on_support(const SpanModel& model, const std::vector<Sentence>& support, const TrainConfig& config,
                              std::uint64_t seed);
/// `skipped` (optional) counts support batches too small for InfoNCE.
TypingModel finetune_on_support(const TypingModel& model, const std::vector<Sentence>& support,
                                const TrainConfig& config, std::uint64_t seed, int* skipped = nullptr);

// ---- evaluation -------------------------------------------------------------

struct Mention {
    size_t sentence = 0;
    int start = 0;
    int end = 0;
    std::string type;

    friend auto operator<=>(const Mention&, const Mention&) = default;
};

struct Scores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long true_positive = 0;
    long predicted = 0;
    long gold = 0;
};

/// Exact-tuple micro scores; duplicates are matched as a multiset.
Scores micro_f1(const std::vector<Mention>& predicted, const std::vector<Mention>& gold);

struct EpisodeScores {
    size_t episode = 0;
    Scores typed;
    Scores span_only;
};

struct AttackCounters {
    long sentences = 0;
    long successes = 0;
    long substitutions = 0;
    long errors = 0;
};

struct ScenarioReport {
    std::string name; // "clean" or "attacked"
    Scores typed;
    Scores span_only;
    double gold_span_typing_accuracy = 0.0;
    std::vector<EpisodeScores> episodes;
    std::vector<std::vector<long>> component_usage; // N_b x N_c over query tokens
    int skipped_infonce = 0;
    AttackCounters attack;
};

struct EvalReport {
    std::vector<ScenarioReport> scenarios;
    double rho = 0.0;
    std::string victim = "pre-finetune";
    std::uint64_t seed = 0;
    std::array<double, 4> gammas{}; // loss weights of the evaluated models
    int n_way = 0;
    int k_shot = 0;

    const ScenarioReport* find(const std::string& name) const;
};

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// Victim used by the attack: stage-1 plus stage-2 loss on gold annotations
/// and the full pipeline prediction, with prototypes fixed up front.
class ModelVictim : public VictimInterface {
public:
    ModelVictim(const SpanModel& span, const TypingModel& typing, Prototypes prototypes);
    double loss(const Sentence& sentence) const override;
    std::vector<EntitySpan> predict(const std::vector<std::string>& tokens) const override;

private:
    const SpanModel& span_;
    const TypingModel& typing_;
    Prototypes prototypes_;
};

/// Predicted spans typed by the nearest prototype.
std::vector<EntitySpan> predict_entities(const SpanModel& span, const TypingModel& typing,
                                         const Prototypes& prototypes, const std::vector<std::string>& tokens);

struct AttackedEpisode {
    Episode episode;
    std::vector<AdversarialSentence> support;
    std::vector<AdversarialSentence> query;
};

/// Attacks support and query with a victim built from the un-finetuned models
/// and prototypes of the clean support set.
AttackedEpisode attack_episode(const Episode& episode, const SpanModel& span, const TypingModel& typing,
                               const CandidateSource& candidates, double rho, std::uint64_t seed);

nlohmann::json attacked_episode_to_json(const AttackedEpisode& a);

/// Scores one list of episodes after per-episode support finetuning.
ScenarioReport evaluate_scenario(const std::string& name, const std::vector<Episode>& episodes,
                                 const SpanModel& span, const TypingModel& typing, const TrainConfig& config);

/// Clean scenario, plus an attacked scenario when `candidates` is given.
EvalReport evaluate(const std::vector<Episode>& episodes, const SpanModel& span, const TypingModel& typing,
                    const TrainConfig& config, const CandidateSource* candidates = nullptr);

} // namespace bdcp
