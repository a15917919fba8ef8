#include "bdcp/config.hpp"

#include "bdcp/error.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace bdcp {

std::string format_number(double v) {
    char buf[64];
    // small magnitudes read better as 1e-3 than 0.001
    const bool tiny = v != 0.0 && std::abs(v) < 5e-3;
    auto res = tiny ? std::to_chars(buf, buf + sizeof buf, v, std::chars_format::scientific)
                    : std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, res.ptr);
    const size_t e = s.find('e');
    if (e == std::string::npos) return s;
    std::string mant = s.substr(0, e), exp = s.substr(e + 1);
    std::string sign;
    if (!exp.empty() && (exp[0] == '-' || exp[0] == '+')) {
        if (exp[0] == '-') sign = "-";
        exp.erase(0, 1);
    }
    exp.erase(0, std::min(exp.find_first_not_of('0'), exp.size() - 1));
    return mant + "e" + sign + exp;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

double to_double(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    double v = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v))
        throw ConfigError("key '" + std::string(key) + "': expected a number, got '" + t + "'");
    return v;
}

long long to_int(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    long long v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size())
        throw ConfigError("key '" + std::string(key) + "': expected an integer, got '" + t + "'");
    return v;
}

bool to_bool(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1") return true;
    if (t == "false" || t == "0") return false;
    throw ConfigError("key '" + std::string(key) + "': expected true or false, got '" + t + "'");
}

template <class T>
ConfigKey real(std::string name, std::string help, bool paper, T TrainConfig::*field) {
    const std::string n = name;
    return {std::move(name), std::move(help), paper,
            [field](const RunConfig& c) { return format_number(c.train.*field); },
            [field, n](RunConfig& c, std::string_view v) { c.train.*field = to_double(n, v); }};
}

template <class T>
ConfigKey integer(std::string name, std::string help, bool paper, T TrainConfig::*field) {
    const std::string n = name;
    return {std::move(name), std::move(help), paper,
            [field](const RunConfig& c) { return std::to_string(c.train.*field); },
            [field, n](RunConfig& c, std::string_view v) {
                const long long x = to_int(n, v);
                if (x < 0 && !std::is_signed_v<T>) throw ConfigError("key '" + n + "' must be non-negative");
                c.train.*field = static_cast<T>(x);
            }};
}

ConfigKey path(std::string name, std::string help, std::string RunConfig::*field) {
    return {std::move(name), std::move(help), false, [field](const RunConfig& c) { return c.*field; },
            [field](RunConfig& c, std::string_view v) { c.*field = trim(v); }};
}

std::vector<ConfigKey> build_keys() {
    using T = TrainConfig;
    std::vector<ConfigKey> k;
    k.push_back(integer("seed", "master seed; components derive theirs by name", false, &T::seed));
    k.push_back(real("lr-span", "stage-1 outer learning rate", true, &T::lr_span));
    k.push_back(real("lr-typing", "stage-2 outer learning rate", true, &T::lr_typing));
    k.push_back(integer("inner-steps", "SGD steps on the support set per episode", false, &T::inner_steps));
    k.push_back(real("inner-lr", "inner SGD learning rate", false, &T::inner_lr));
    k.push_back(real("inner-clip", "inner gradient-norm cap (0 disables)", false, &T::inner_clip));
    k.push_back(integer("batch-size", "sentences per forward batch", true, &T::batch_size));
    k.push_back(real("weight-decay", "AdamW decoupled weight decay", false, &T::weight_decay));
    k.push_back(real("adam-beta1", "AdamW first-moment decay", false, &T::adam_beta1));
    k.push_back(real("adam-beta2", "AdamW second-moment decay", false, &T::adam_beta2));
    k.push_back(real("adam-eps", "AdamW denominator epsilon", false, &T::adam_eps));
    k.push_back(integer("n-way", "entity types per episode", false, &T::n_way));
    k.push_back(integer("k-shot", "support instances per type", false, &T::k_shot));
    k.push_back(integer("k-query", "query instances per type", false, &T::k_query));
    k.push_back(integer("train-episodes", "episodes sampled for training", false, &T::train_episodes));
    k.push_back(integer("eval-episodes", "episodes sampled for evaluation", false, &T::eval_episodes));
    k.push_back(integer("width", "encoder width C", false, &T::width));
    k.push_back(integer("blocks", "transformer blocks T", false, &T::blocks));
    k.push_back(integer("heads", "attention heads", false, &T::heads));
    k.push_back(integer("ffn-width", "feed-forward hidden width", false, &T::ffn_width));
    k.push_back(real("dropout", "dropout probability", true, &T::dropout));
    k.push_back(integer("max-length", "maximum sequence length", true, &T::max_length));
    k.push_back(real("embedding-scale", "std of the initial word embeddings", false, &T::embedding_scale));
    k.push_back(integer("components", "bank components per boundary class N_c", true, &T::components));
    k.push_back(real("tau", "margin-softmax temperature", true, &T::tau));
    k.push_back(real("margin", "angular margin m", true, &T::margin));
    k.push_back(real("alpha", "weight of the max term in the span loss", false, &T::alpha));
    k.push_back(real("gamma1", "assignment loss weight", true, &T::gamma1));
    k.push_back(real("gamma2", "diversity loss weight", true, &T::gamma2));
    k.push_back(real("gamma3", "correlation facilitation weight", true, &T::gamma3));
    k.push_back(real("gamma4", "correlation filter weight", true, &T::gamma4));
    k.push_back({"centroid-decoding", "decode boundaries by nearest bank centroid", false,
                 [](const RunConfig& c) { return std::string(c.train.centroid_decoding ? "true" : "false"); },
                 [](RunConfig& c, std::string_view v) { c.train.centroid_decoding = to_bool("centroid-decoding", v); }});
    k.push_back(integer("bottleneck", "information-bottleneck width D", false, &T::bottleneck));
    k.push_back({"distance", "prototype distance: euclidean or cosine", false,
                 [](const RunConfig& c) {
                     return std::string(c.train.distance == Distance::Cosine ? "cosine" : "euclidean");
                 },
                 [](RunConfig& c, std::string_view v) {
                     const std::string t = trim(v);
                     if (t == "euclidean")
                         c.train.distance = Distance::SquaredEuclidean;
                     else if (t == "cosine")
                         c.train.distance = Distance::Cosine;
                     else
                         throw ConfigError("key 'distance': expected euclidean or cosine, got '" + t + "'");
                 }});
    k.push_back(real("rho", "attack budget as a fraction of sentence length", false, &T::rho));
    k.push_back(path("corpus", "column-format corpus path", &RunConfig::corpus));
    k.push_back(path("lexicon", "synonym lexicon path", &RunConfig::lexicon));
    k.push_back(path("episodes", "episode JSONL path", &RunConfig::episodes));
    k.push_back(path("checkpoints", "checkpoint directory", &RunConfig::checkpoints));
    k.push_back(path("report", "evaluation report path", &RunConfig::report));
    return k;
}

} // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = build_keys();
    return keys;
}

const ConfigKey* find_config_key(std::string_view name) {
    for (const auto& k : config_keys())
        if (k.name == name) return &k;
    return nullptr;
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
    const ConfigKey* k = find_config_key(key);
    if (!k) throw ConfigError("unknown config key '" + std::string(key) + "'");
    k->set(config, value);
}

void apply_config_text(RunConfig& config, std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    size_t ln = 0;
    while (std::getline(in, line)) {
        ++ln;
        const auto hash = line.find('#');
        const std::string body = trim(std::string_view(line).substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(ln) + ": expected key = value");
        try {
            set_config_value(config, trim(std::string_view(body).substr(0, eq)), std::string_view(body).substr(eq + 1));
        } catch (const ConfigError& ex) {
            throw ConfigError("line " + std::to_string(ln) + ": " + ex.what());
        }
    }
}

RunConfig parse_config(std::string_view text) {
    RunConfig c;
    apply_config_text(c, text);
    return c;
}

std::string serialize_config(const RunConfig& config) {
    std::string out;
    for (const auto& k : config_keys()) out += k.name + " = " + k.get(config) + "\n";
    return out;
}

std::string describe_defaults() {
    const RunConfig defaults;
    std::string out = "# defaults; [paper] marks values from the published implementation details\n";
    for (const auto& k : config_keys()) {
        out += k.name + " = " + k.get(defaults) + "  # " + k.help;
        if (k.from_paper) out += " [paper]";
        out += "\n";
    }
    return out;
}

} // namespace bdcp
