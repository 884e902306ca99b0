#include <CLI11.hpp>
#include <iostream>

#include "commands.hpp"
#include "targetforge/error.hpp"
#include "targetforge/parallel.hpp"

namespace tf = targetforge;

int main(int argc, char** argv) {
  CLI::App app{"Target Training defense: train, attack, evaluate and reproduce"};
  app.require_subcommand(1);
  app.fallthrough();
  int workers = tf::available_workers();
  app.add_option("--workers", workers, "Attack and evaluation threads")->check(CLI::PositiveNumber);

  std::string config, checkpoint, source, target, out, csv, attack, preset, dataset, dir, mirror;
  bool plan_only = false;

  auto* train = app.add_subcommand("train", "Train a model from a run configuration");
  train->add_option("--config", config, "Run configuration (JSON)")->required();
  train->add_option("--out", out, "Checkpoint path");

  auto* attack_cmd = app.add_subcommand("attack", "Export adversarial samples");
  attack_cmd->add_option("--config", config, "Run configuration (JSON)")->required();
  attack_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  attack_cmd->add_option("--attack", attack, "Attack configuration (JSON)");
  attack_cmd->add_option("--out", out, "Output sample file")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a model against the configured attacks");
  eval->add_option("--config", config, "Run configuration (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--out", out, "JSON report path")->required();
  eval->add_option("--csv", csv, "CSV report path");

  auto* transfer = app.add_subcommand("transfer", "Score samples crafted on one model with another");
  transfer->add_option("--config", config, "Run configuration (JSON)")->required();
  transfer->add_option("--source", source, "Checkpoint the attacks run against")->required();
  transfer->add_option("--target", target, "Checkpoint that classifies the samples")->required();
  transfer->add_option("--out", out, "JSON report path")->required();
  transfer->add_option("--csv", csv, "CSV report path");

  auto* reproduce = app.add_subcommand("reproduce", "Run an embedded experiment preset");
  reproduce->add_option("--preset", preset, "toy, mnist or cifar10")
      ->required()
      ->check(CLI::IsMember({"toy", "mnist", "cifar10"}));
  reproduce->add_option("--out", out, "Report directory")->required();
  reproduce->add_flag("--plan", plan_only, "Write the plan without running it");

  app.add_subcommand("defaults", "Print every embedded default");

  auto* fetch = app.add_subcommand("fetch-data", "Download and verify a dataset");
  fetch->add_option("--dataset", dataset, "mnist or cifar10")->required()->check(CLI::IsMember({"mnist", "cifar10"}));
  fetch->add_option("--dir", dir, "Destination (default: $TARGETFORGE_DATA_DIR/<dataset>)");
  fetch->add_option("--mirror", mirror, "Base URL replacing the canonical one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : tf::cli::kConfigFailure;
  }

  auto optional_path = [](const std::string& s) {
    return s.empty() ? std::nullopt : std::optional<std::filesystem::path>(s);
  };
  tf::cli::CommandOptions options{workers, &std::cerr};
  try {
    if (*train) {
      tf::cli::cmd_train(config, optional_path(out), options);
    } else if (*attack_cmd) {
      tf::cli::cmd_attack(config, checkpoint, optional_path(attack), out, options);
    } else if (*eval) {
      tf::cli::cmd_eval(config, checkpoint, out, optional_path(csv), options);
    } else if (*transfer) {
      tf::cli::cmd_transfer(config, source, target, out, optional_path(csv), options);
    } else if (*reproduce) {
      tf::cli::cmd_reproduce(preset, out, plan_only, options);
    } else if (*fetch) {
      tf::cli::cmd_fetch(dataset, optional_path(dir), mirror, options);
    } else {
      std::cout << tf::cli::cmd_defaults();
    }
  } catch (const tf::ConfigError& e) {
    std::cerr << "configuration invalid:\n";
    for (const auto& p : e.problems()) std::cerr << "  - " << p << "\n";
    return tf::cli::kConfigFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return tf::cli::exit_code_for(e);
  }
  return tf::cli::kOk;
}
