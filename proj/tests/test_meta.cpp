#include "bdcp/error.hpp"
#include "bdcp/meta.hpp"
#include "bdcp/synthetic.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

using namespace bdcp;

namespace {

TrainConfig toy_config() {
    TrainConfig c;
    c.width = 8;
    c.blocks = 1;
    c.heads = 2;
    c.ffn_width = 16;
    c.components = 3;
    c.bottleneck = 4;
    c.dropout = 0.0;
    c.lr_span = c.lr_typing = 3e-3;
    return c;
}

struct Toy {
    Corpus corpus;
    Vocabulary vocab;
    std::vector<Episode> episodes;
};

const Toy& toy() {
    static const Toy t = [] {
        Toy out;
        SyntheticConfig sc;
        sc.types = 6;
        sc.sentences = 120;
        out.corpus = synthetic_corpus(sc);
        out.vocab = corpus_vocabulary(out.corpus);
        for (std::uint64_t i = 0; i < 4; ++i) out.episodes.push_back(sample_episode(out.corpus, 3, 1, 2, i));
        return out;
    }();
    return t;
}

// Independent counter: sort both lists and walk them.
Scores count_oracle(std::vector<Mention> p, std::vector<Mention> g) {
    std::sort(p.begin(), p.end());
    std::sort(g.begin(), g.end());
    std::vector<Mention> both;
    std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(both));
    Scores s;
    s.true_positive = static_cast<long>(both.size());
    s.predicted = static_cast<long>(p.size());
    s.gold = static_cast<long>(g.size());
    s.precision = p.empty() ? 0.0 : double(both.size()) / double(p.size());
    s.recall = g.empty() ? 0.0 : double(both.size()) / double(g.size());
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

} // namespace

TEST_CASE("micro_f1") {
    const std::vector<Mention> gold = {{0, 0, 1, "A"}, {0, 3, 3, "B"}, {1, 2, 4, "A"}};
    const Scores same = micro_f1(gold, gold);
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);
    CHECK(same.f1 == 1.0);
    const Scores none = micro_f1({}, gold);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);
    CHECK(micro_f1({}, {}).f1 == 0.0);

    const std::vector<Mention> pred = {{0, 0, 1, "A"}, {0, 3, 3, "A"}, {1, 2, 4, "A"}, {2, 0, 0, "C"}};
    const Scores s = micro_f1(pred, gold), o = count_oracle(pred, gold);
    CHECK(s.true_positive == o.true_positive);
    CHECK(s.precision == doctest::Approx(o.precision));
    CHECK(s.recall == doctest::Approx(o.recall));
    CHECK(s.f1 == doctest::Approx(o.f1));
    CHECK(s.f1 == doctest::Approx(2.0 * 0.5 * (2.0 / 3.0) / (0.5 + 2.0 / 3.0)));

    std::mt19937_64 rng(4);
    auto p2 = pred, g2 = gold;
    for (int t = 0; t < 20; ++t) {
        std::shuffle(p2.begin(), p2.end(), rng);
        std::shuffle(g2.begin(), g2.end(), rng);
        CHECK(micro_f1(p2, g2).f1 == s.f1);
    }
}

TEST_CASE("config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.lr_span = 0.0; // a zero rate is a legal no-op
    CHECK_NOTHROW(c.validate());
    c.lr_span = -1e-3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.tau = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.width = 7; // not divisible by the head count
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("training leaves parameters alone when it should") {
    const Toy& t = toy();
    TrainConfig c = toy_config();
    const SpanModel span = make_span_model(c, t.vocab);
    const TypingModel typing = make_typing_model(c, t.vocab);

    CHECK(checksum(train_span_stage(span, {}, c).model) == checksum(span));
    c.inner_steps = 0;
    CHECK(checksum(train_span_stage(span, {}, c).model) == checksum(span));

    TrainConfig zero = toy_config();
    zero.lr_span = zero.lr_typing = 0.0;
    const auto r = train_span_stage(span, {t.episodes[0]}, zero);
    CHECK(r.history.size() == 1);
    CHECK(checksum(r.model) == checksum(span));

    const std::uint64_t before = checksum(span);
    const auto ty = train_typing_stage(typing, span, {t.episodes[0], t.episodes[1]}, toy_config());
    CHECK(checksum(span) == before);
    CHECK(ty.history.size() == 2);
    CHECK(checksum(ty.model) != checksum(typing));
}

TEST_CASE("span training keeps the bank on the unit sphere and logs metrics") {
    const Toy& t = toy();
    const TrainConfig c = toy_config();
    int calls = 0;
    const auto r = train_span_stage(make_span_model(c, t.vocab), t.episodes, c, [&](const StepMetrics&) { ++calls; });
    CHECK_FALSE(r.diverged);
    CHECK(calls == 4);
    CHECK(r.history.size() == 4);
    for (Eigen::Index i = 0; i < r.model.bank.components.rows(); ++i)
        CHECK(std::abs(r.model.bank.components.row(i).norm() - 1.0) < 1e-6);
    const auto j = metrics_to_json(r.history.back());
    CHECK(j.at("stage") == "span");
    CHECK(j.at("step") == 4);
    CHECK(std::isfinite(j.at("query_loss").get<double>()));

    const auto again = train_span_stage(make_span_model(c, t.vocab), t.episodes, c);
    CHECK(checksum(again.model) == checksum(r.model));
}

TEST_CASE("divergence stops with the last finite parameters") {
    const Toy& t = toy();
    const TrainConfig c = toy_config();
    SpanModel broken = make_span_model(c, t.vocab);
    broken.head.weight(0, 0) = std::nan("");
    const auto r = train_span_stage(broken, t.episodes, c);
    CHECK(r.diverged);
    CHECK(r.history.empty());
    CHECK(r.message.find("diverged") != std::string::npos);

    Episode empty = t.episodes[0];
    empty.query.clear();
    CHECK_THROWS_AS(train_span_stage(make_span_model(c, t.vocab), {empty}, c), InvariantError);
}

TEST_CASE("finetune_on_support") {
    const Toy& t = toy();
    TrainConfig c = toy_config();
    const SpanModel span = make_span_model(c, t.vocab);
    const TypingModel typing = make_typing_model(c, t.vocab);
    const auto& support = t.episodes[0].support;
    const std::uint64_t s0 = checksum(span), t0 = checksum(typing);

    TrainConfig none = c;
    none.inner_steps = 0;
    CHECK(checksum(finetune_on_support(span, support, none, 1)) == s0);
    CHECK(checksum(finetune_on_support(typing, support, none, 1)) == t0);

    c.inner_steps = 5;
    c.inner_lr = 5e-2;
    double prev_span = span_loss_value(span, support), prev_typing = typing_loss_value(typing, support, support);
    SpanModel s = span;
    TypingModel ty = typing;
    TrainConfig one = c;
    one.inner_steps = 1;
    for (int k = 0; k < 5; ++k) {
        s = finetune_on_support(s, support, one, 9);
        ty = finetune_on_support(ty, support, one, 9);
        const double ls = span_loss_value(s, support), lt = typing_loss_value(ty, support, support);
        CHECK(ls < prev_span);
        CHECK(lt < prev_typing);
        prev_span = ls;
        prev_typing = lt;
    }
    const SpanModel five = finetune_on_support(span, support, c, 9);
    CHECK(span_loss_value(five, support) < span_loss_value(span, support));
    CHECK(checksum(span) == s0);
    CHECK(checksum(typing) == t0);
}

TEST_CASE("evaluation") {
    const Toy& t = toy();
    const TrainConfig c = toy_config();
    const SpanModel span = train_span_stage(make_span_model(c, t.vocab), t.episodes, c).model;
    const TypingModel typing = train_typing_stage(make_typing_model(c, t.vocab), span, t.episodes, c).model;
    SyntheticConfig sc;
    sc.types = 6;
    const SynonymLexicon lex = synthetic_lexicon(sc);

    const EvalReport a = evaluate(t.episodes, span, typing, c, &lex);
    const EvalReport b = evaluate(t.episodes, span, typing, c, &lex);
    CHECK(report_to_json(a) == report_to_json(b));
    REQUIRE(a.find("clean") != nullptr);
    REQUIRE(a.find("attacked") != nullptr);
    CHECK(a.victim == "pre-finetune");
    CHECK(a.rho == c.rho);
    CHECK(a.gammas == std::array<double, 4>{0.1, 0.1, 1e-3, 1e-5});
    for (const auto& sc2 : a.scenarios) {
        for (double v : {sc2.typed.precision, sc2.typed.recall, sc2.typed.f1, sc2.span_only.f1})
            CHECK((v >= 0.0 && v <= 1.0));
        CHECK(sc2.episodes.size() == t.episodes.size());
        CHECK(sc2.component_usage.size() == 5);
    }
    CHECK(a.find("attacked")->attack.sentences > 0);
    CHECK(evaluate(t.episodes, span, typing, c).find("attacked") == nullptr);

    const EvalReport back = report_from_json(report_to_json(a));
    CHECK(report_to_json(back) == report_to_json(a));
    CHECK_THROWS_AS(report_from_json(nlohmann::json::parse("{\"scenarios\": 3}")), ParseError);

    // Attacked episodes keep every gold annotation.
    const AttackedEpisode ae = attack_episode(t.episodes[0], span, typing, lex, 0.4, 5);
    REQUIRE(ae.support.size() == t.episodes[0].support.size());
    for (size_t i = 0; i < ae.support.size(); ++i) CHECK(ae.episode.support[i].spans == t.episodes[0].support[i].spans);
    for (const auto& q : ae.query)
        CHECK(static_cast<int>(q.substitutions.size()) <= substitution_budget(0.4, q.original.size()));
}
