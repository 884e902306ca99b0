#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "presets.hpp"
#include "run_config.hpp"

namespace targetforge::cli {

enum ExitCode : int { kOk = 0, kConfigFailure = 2, kDataFailure = 3, kRuntimeFailure = 4 };

/// Maps an exception escaping a subcommand to the process exit code.
int exit_code_for(const std::exception& e);

struct CommandOptions {
  int workers = 1;
  std::ostream* log = nullptr;
};

/// Defaults to <output_dir>/model.tfck; the training log goes next to it as <stem>.train.jsonl.
std::filesystem::path cmd_train(const std::filesystem::path& config, const std::optional<std::filesystem::path>& out,
                               const CommandOptions& options);

/// Uses `attack` (a JSON file) when given, otherwise the config's single attack.
void cmd_attack(const std::filesystem::path& config, const std::filesystem::path& checkpoint,
                const std::optional<std::filesystem::path>& attack, const std::filesystem::path& out,
                const CommandOptions& options);

/// One clean entry followed by one entry per configured attack.
EvalReport cmd_eval(const std::filesystem::path& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& out, const std::optional<std::filesystem::path>& csv,
                    const CommandOptions& options);

EvalReport cmd_transfer(const std::filesystem::path& config, const std::filesystem::path& source,
                        const std::filesystem::path& target, const std::filesystem::path& out,
                        const std::optional<std::filesystem::path>& csv, const CommandOptions& options);

/// With `plan_only`, writes plan.json and returns without training.
void cmd_reproduce(const std::string& preset, const std::filesystem::path& out, bool plan_only,
                   const CommandOptions& options);

/// Every embedded default: run configuration, each attack and each preset plan.
std::string cmd_defaults();

void cmd_fetch(const std::string& dataset, const std::optional<std::filesystem::path>& dir,
               const std::string& mirror, const CommandOptions& options);

}  // namespace targetforge::cli
