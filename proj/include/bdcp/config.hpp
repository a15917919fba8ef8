// Flat `key = value` run configuration shared by every subcommand.

#pragma once

#include "bdcp/meta.hpp"

#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace bdcp {

struct RunConfig {
    TrainConfig train;
    std::string corpus;
    std::string lexicon;
    std::string episodes;
    std::string checkpoints;
    std::string report;
};

struct ConfigKey {
    std::string name;
    std::string help;
    bool from_paper = false; // default taken from the published setup
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, std::string_view)> set; // throws ConfigError on a bad value
};

/// Every recognised key in a stable order.
const std::vector<ConfigKey>& config_keys();
const ConfigKey* find_config_key(std::string_view name);

/// Shortest round-trip text for a double, with a compact exponent (3e-5).
std::string format_number(double v);

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Unknown keys and malformed values throw ConfigError naming the line.
void apply_config_text(RunConfig& config, std::string_view text);
RunConfig parse_config(std::string_view text);
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

/// Full key listing, one `key = value` line each.
std::string serialize_config(const RunConfig& config);
/// Same listing with help text, marking defaults taken from the paper.
std::string describe_defaults();

} // namespace bdcp
