#include "bdcp/cli.hpp"

#include "bdcp/config.hpp"
#include "bdcp/error.hpp"
#include "bdcp/seed.hpp"
#include "bdcp/synthetic.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

namespace bdcp {

namespace fs = std::filesystem;

namespace {

constexpr const char* kSpanCheckpoint = "stage1/span.ckpt";
constexpr const char* kTypingCheckpoint = "stage2/typing.ckpt";
constexpr const char* kConfigSnapshot = "config.txt";
constexpr const char* kMetrics = "metrics.jsonl";

std::string read_file(const std::string& path) {
    if (path.empty()) throw Error("missing input path");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::ofstream open_out(const std::string& path, bool append = false) {
    if (path.empty()) throw Error("missing output path");
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
    if (!out) throw Error("cannot write '" + path + "'");
    return out;
}

std::vector<Episode> load_episodes(const std::string& path) {
    std::istringstream in(read_file(path));
    return read_episodes(in);
}

Vocabulary episode_vocabulary(const std::vector<Episode>& episodes) {
    Corpus all;
    for (const auto& e : episodes) {
        all.insert(all.end(), e.support.begin(), e.support.end());
        all.insert(all.end(), e.query.begin(), e.query.end());
    }
    return corpus_vocabulary(all);
}

std::string checkpoint_path(const RunConfig& c, const char* rel) {
    if (c.checkpoints.empty()) throw Error("no checkpoint directory given (--checkpoints)");
    return (fs::path(c.checkpoints) / rel).string();
}

SpanModel load_span(const RunConfig& c) {
    const std::string p = checkpoint_path(c, kSpanCheckpoint);
    if (!fs::exists(p)) throw Error("missing stage-1 checkpoint '" + p + "'");
    std::ifstream in(p, std::ios::binary);
    return load_span_model(in);
}

TypingModel load_typing(const RunConfig& c) {
    const std::string p = checkpoint_path(c, kTypingCheckpoint);
    if (!fs::exists(p)) throw Error("missing stage-2 checkpoint '" + p + "'");
    std::ifstream in(p, std::ios::binary);
    return load_typing_model(in);
}

// Every config key becomes a long flag; values given on the command line
// override the --config file, which overrides the defaults.
struct ConfigFlags {
    std::string file;
    std::map<std::string, std::string> values;
    std::vector<std::pair<std::string, CLI::Option*>> options;

    void attach(CLI::App* app) {
        app->add_option("--config", file, "flat key = value configuration file");
        for (const auto& k : config_keys())
            options.emplace_back(k.name, app->add_option("--" + k.name, values[k.name], k.help)
                                             ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast));
    }

    RunConfig resolve() const {
        RunConfig c;
        if (!file.empty()) apply_config_text(c, read_file(file));
        for (const auto& [name, opt] : options)
            if (opt->count() > 0) set_config_value(c, name, values.at(name));
        c.train.validate();
        return c;
    }
};

void write_lines(std::ostream& out, const std::vector<nlohmann::json>& lines) {
    for (const auto& j : lines) out << j.dump() << '\n';
}

// ---- subcommands ----------------------------------------------------------------

int cmd_prepare(const RunConfig& c, const std::string& out_path, int count, std::ostream& out) {
    if (c.corpus.empty()) throw Error("no corpus given (--corpus)");
    if (count < 0) throw ConfigError("--count must be non-negative");
    const Corpus corpus = parse_corpus(read_file(c.corpus));
    const TrainConfig& t = c.train;
    std::vector<Episode> episodes;
    const std::uint64_t base = derive_seed(t.seed, "prepare");
    for (int i = 0; i < count; ++i) {
        Episode e = sample_episode(corpus, t.n_way, t.k_shot, t.k_query, derive_seed(base, static_cast<std::uint64_t>(i)));
        check_episode(e, t.n_way, t.k_shot);
        episodes.push_back(std::move(e));
    }
    {
        auto f = open_out(out_path);
        write_episodes(f, episodes);
    }
    const nlohmann::json manifest = {{"episodes_file", fs::path(out_path).filename().string()},
                                     {"corpus", c.corpus},
                                     {"count", count},
                                     {"n_way", t.n_way},
                                     {"k_shot", t.k_shot},
                                     {"k_query", t.k_query},
                                     {"seed", t.seed}};
    auto m = open_out(out_path + ".manifest.json");
    m << manifest.dump(2) << '\n';
    out << "wrote " << count << " episodes to " << out_path << '\n';
    return 0;
}

int cmd_attack(const RunConfig& c, const std::string& out_path, std::ostream& out, std::ostream& err) {
    const SpanModel span = load_span(c);
    const TypingModel typing = load_typing(c);
    if (c.lexicon.empty()) throw Error("no lexicon given (--lexicon)");
    const SynonymLexicon lexicon = parse_lexicon(read_file(c.lexicon));
    const auto episodes = load_episodes(c.episodes);
    std::vector<nlohmann::json> lines;
    long failures = 0, successes = 0, sentences = 0;
    const std::uint64_t base = derive_seed(c.train.seed, "attack");
    for (size_t e = 0; e < episodes.size(); ++e) {
        const AttackedEpisode a = attack_episode(episodes[e], span, typing, lexicon, c.train.rho,
                                                 derive_seed(base, static_cast<std::uint64_t>(e)));
        for (const auto* list : {&a.support, &a.query})
            for (const auto& s : *list) {
                ++sentences;
                successes += s.success ? 1 : 0;
                if (!s.error.empty()) {
                    ++failures;
                    err << kErrorPrefix << "episode " << e << ": victim failed: " << s.error << '\n';
                }
            }
        nlohmann::json j = attacked_episode_to_json(a);
        j["rho"] = c.train.rho;
        j["victim"] = "pre-finetune";
        lines.push_back(std::move(j));
    }
    auto f = open_out(out_path);
    write_lines(f, lines);
    out << "attacked " << sentences << " sentences, " << successes << " successful, rho " << format_number(c.train.rho)
        << '\n';
    return failures == 0 ? 0 : 1;
}

void write_snapshot(const RunConfig& c) {
    auto f = open_out(checkpoint_path(c, kConfigSnapshot));
    f << serialize_config(c);
}

template <class Model>
void save_model(const std::string& path, const Model& model) {
    auto f = open_out(path);
    if constexpr (std::is_same_v<Model, SpanModel>)
        save_span_model(f, model);
    else
        save_typing_model(f, model);
    if (!f) throw Error("failed writing '" + path + "'");
}

template <class Model>
int finish_training(const RunConfig& c, const TrainResult<Model>& r, const char* rel, bool append_metrics,
                    std::ostream& out, std::ostream& err) {
    save_model(checkpoint_path(c, rel), r.model);
    write_snapshot(c);
    auto m = open_out(checkpoint_path(c, kMetrics), append_metrics);
    for (const auto& s : r.history) m << metrics_to_json(s).dump() << '\n';
    if (r.diverged) {
        err << kErrorPrefix << r.message << "; kept the last finite parameters\n";
        return 1;
    }
    out << "trained " << r.history.size() << " episodes; checkpoint " << checkpoint_path(c, rel) << '\n';
    return 0;
}

int cmd_train_span(const RunConfig& c, std::ostream& out, std::ostream& err) {
    const auto episodes = load_episodes(c.episodes);
    const SpanModel init = make_span_model(c.train, episode_vocabulary(episodes));
    return finish_training(c, train_span_stage(init, episodes, c.train), kSpanCheckpoint, false, out, err);
}

int cmd_train_type(const RunConfig& c, std::ostream& out, std::ostream& err) {
    const SpanModel stage1 = load_span(c); // stage 1 must exist: the stages are trained serially
    const auto episodes = load_episodes(c.episodes);
    const TypingModel init = make_typing_model(c.train, stage1.encoder.vocab);
    return finish_training(c, train_typing_stage(init, stage1, episodes, c.train), kTypingCheckpoint, true, out, err);
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
    const SpanModel span = load_span(c);
    const TypingModel typing = load_typing(c);
    const auto episodes = load_episodes(c.episodes);
    std::unique_ptr<SynonymLexicon> lexicon;
    if (!c.lexicon.empty()) lexicon = std::make_unique<SynonymLexicon>(parse_lexicon(read_file(c.lexicon)));
    const EvalReport report = evaluate(episodes, span, typing, c.train, lexicon.get());
    if (c.report.empty()) throw Error("no report path given (--report)");
    auto f = open_out(c.report);
    f << report_to_json(report).dump(2) << '\n';
    out << format_reports({fs::path(c.report).stem().string()}, {report});
    return 0;
}

int cmd_report(const std::vector<std::string>& files, std::ostream& out) {
    if (files.empty()) throw Error("report needs at least one report file");
    std::vector<EvalReport> reports;
    std::vector<std::string> names;
    for (const auto& f : files) {
        try {
            reports.push_back(report_from_json(nlohmann::json::parse(read_file(f))));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(0, "'" + f + "': " + ex.what());
        }
        names.push_back(fs::path(f).stem().string());
    }
    out << format_reports(names, reports);
    return 0;
}

int cmd_dump_reps(const RunConfig& c, const std::string& out_path, std::ostream& out) {
    const TypingModel typing = load_typing(c);
    const auto episodes = load_episodes(c.episodes);
    auto f = open_out(out_path);
    f << representation_csv(episodes, typing);
    out << "wrote representations to " << out_path << '\n';
    return 0;
}

std::string percent(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * v;
    return s.str();
}

} // namespace

std::string ablation_label(const std::array<double, 4>& g) {
    const bool a = g[0] > 0, d = g[1] > 0, f = g[2] > 0, r = g[3] > 0;
    if (!a && !d && !f && !r) return "base";
    if (a && d && f && r) return "BDCP";
    if (a && !d && !f && !r) return "+assignment";
    if (a && d && !f && !r) return "+components";
    if (!a && !d && f && !r) return "+facilitating";
    if (!a && !d && !f && r) return "+filter";
    if (!a && !d && f && r) return "+purify";
    return "custom";
}

std::string format_reports(const std::vector<std::string>& names, const std::vector<EvalReport>& reports) {
    if (names.size() != reports.size()) throw InvariantError("one name per report expected");
    auto cell = [](const EvalReport& r, const char* scenario, bool typed) {
        const ScenarioReport* s = r.find(scenario);
        if (!s) return std::string("-");
        return percent(typed ? s->typed.f1 : s->span_only.f1);
    };
    std::ostringstream out;
    out << "| metric |";
    for (const auto& n : names) out << ' ' << n << " |";
    out << "\n|---|";
    for (size_t i = 0; i < names.size(); ++i) out << "---|";
    out << '\n';
    const std::pair<const char*, std::pair<const char*, bool>> rows[] = {
        {"Clean F1", {"clean", true}},
        {"Attack F1", {"attacked", true}},
        {"Clean span F1", {"clean", false}},
        {"Attack span F1", {"attacked", false}}};
    for (const auto& [label, what] : rows) {
        out << "| " << label << " |";
        for (const auto& r : reports) out << ' ' << cell(r, what.first, what.second) << " |";
        out << '\n';
    }
    bool ablation = false;
    for (const auto& r : reports) ablation = ablation || r.gammas != reports.front().gammas;
    if (ablation) {
        out << "\n| run | variant | gamma1 | gamma2 | gamma3 | gamma4 | Clean | Attack |\n"
               "|---|---|---|---|---|---|---|---|\n";
        for (size_t i = 0; i < reports.size(); ++i) {
            const auto& g = reports[i].gammas;
            out << "| " << names[i] << " | " << ablation_label(g) << " | " << format_number(g[0]) << " | "
                << format_number(g[1]) << " | " << format_number(g[2]) << " | " << format_number(g[3]) << " | "
                << cell(reports[i], "clean", true) << " | " << cell(reports[i], "attacked", true) << " |\n";
        }
    }
    return out.str();
}

std::string representation_csv(const std::vector<Episode>& episodes, const TypingModel& typing) {
    std::ostringstream out;
    out << "episode,type";
    for (int d = 0; d < typing.encoder.config.width; ++d) out << ",d" << d;
    out << '\n';
    char buf[64];
    for (size_t e = 0; e < episodes.size(); ++e)
        for (const auto& s : episodes[e].query) {
            if (s.spans.empty()) continue;
            std::vector<std::pair<int, int>> spans;
            for (const auto& sp : s.spans) spans.emplace_back(sp.start, sp.end);
            const auto reps = span_representations(typing, s.tokens, spans);
            for (size_t i = 0; i < reps.size(); ++i) {
                out << e << ',' << s.spans[i].type;
                for (Eigen::Index d = 0; d < reps[i].size(); ++d) {
                    auto res = std::to_chars(buf, buf + sizeof buf, reps[i](d));
                    out << ',' << std::string_view(buf, static_cast<size_t>(res.ptr - buf));
                }
                out << '\n';
            }
        }
    return out.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Few-shot NER with boundary discrimination and correlation purification"};
    app.require_subcommand(1);

    ConfigFlags prepare_flags, attack_flags, span_flags, type_flags, eval_flags, dump_flags;
    std::string prepare_out, attack_out, dump_out, check_file;
    int count = -1;
    bool print_defaults = false;
    std::vector<std::string> report_files;

    auto* prepare = app.add_subcommand("prepare", "sample N-way K-shot episodes from a corpus");
    prepare_flags.attach(prepare);
    prepare->add_option("--out", prepare_out, "episode JSONL output")->required();
    prepare->add_option("--count", count, "number of episodes (default: train-episodes)");

    auto* attack = app.add_subcommand("attack", "write synonym-substitution attacked episodes");
    attack_flags.attach(attack);
    attack->add_option("--out", attack_out, "attacked episode JSONL output")->required();

    auto* train_span = app.add_subcommand("train-span", "meta-train the span detection stage");
    span_flags.attach(train_span);
    auto* train_type = app.add_subcommand("train-type", "meta-train the entity typing stage");
    type_flags.attach(train_type);
    auto* eval = app.add_subcommand("eval", "evaluate on clean and, given a lexicon, attacked episodes");
    eval_flags.attach(eval);

    auto* report = app.add_subcommand("report", "tabulate evaluation reports");
    report->add_option("files", report_files, "report JSON files")->required();

    auto* dump = app.add_subcommand("dump-reps", "export query span representations as CSV");
    dump_flags.attach(dump);
    dump->add_option("--out", dump_out, "CSV output")->required();

    auto* config = app.add_subcommand("config", "inspect configuration");
    config->add_flag("--print-defaults", print_defaults, "print every key with its default");
    config->add_option("--check", check_file, "validate a config file and print the resolved values");

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& ex) {
        err << kErrorPrefix << ex.what() << '\n';
        return 2;
    }

    try {
        if (prepare->parsed()) {
            const RunConfig c = prepare_flags.resolve();
            return cmd_prepare(c, prepare_out, count >= 0 ? count : c.train.train_episodes, out);
        }
        if (attack->parsed()) return cmd_attack(attack_flags.resolve(), attack_out, out, err);
        if (train_span->parsed()) return cmd_train_span(span_flags.resolve(), out, err);
        if (train_type->parsed()) return cmd_train_type(type_flags.resolve(), out, err);
        if (eval->parsed()) return cmd_eval(eval_flags.resolve(), out);
        if (report->parsed()) return cmd_report(report_files, out);
        if (dump->parsed()) return cmd_dump_reps(dump_flags.resolve(), dump_out, out);
        if (config->parsed()) {
            if (!check_file.empty()) {
                RunConfig c = parse_config(read_file(check_file));
                c.train.validate();
                out << serialize_config(c);
                return 0;
            }
            if (print_defaults) {
                out << describe_defaults();
                return 0;
            }
            err << kErrorPrefix << "config needs --print-defaults or --check\n";
            return 2;
        }
    } catch (const std::exception& ex) {
        err << kErrorPrefix << ex.what() << '\n';
        return 1;
    }
    return 2;
}

} // namespace bdcp
