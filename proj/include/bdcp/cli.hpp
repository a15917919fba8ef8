// Command-line front end. `run_cli` is the whole program minus process
// plumbing so tests can drive subcommands in-process.

#pragma once

#include "bdcp/meta.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace bdcp {

/// Prefix of every diagnostic line written to the error stream.
inline constexpr const char* kErrorPrefix = "bdcp: error: ";

/// Runs one subcommand (`args[0]` is the program name). Returns the process
/// exit code: 0 on success, 1 on a runtime error, 2 on a usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Label for a set of loss weights in ablation tables: base, +assignment,
/// +components, +facilitating, +filter, +purify, BDCP or custom.
std::string ablation_label(const std::array<double, 4>& gammas);

/// Markdown clean-vs-attack table (one column per report) followed by an
/// ablation table when the reports differ in their loss weights.
std::string format_reports(const std::vector<std::string>& names, const std::vector<EvalReport>& reports);

/// CSV of query-span representations: `episode,type,d0,...` with one row per
/// gold query span, using the stage-2 encoder without finetuning.
std::string representation_csv(const std::vector<Episode>& episodes, const TypingModel& typing);

} // namespace bdcp
