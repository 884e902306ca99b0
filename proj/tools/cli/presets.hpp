#pragma once

#include <filesystem>
#include <iosfwd>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "run_config.hpp"
#include "targetforge/evaluation.hpp"

namespace targetforge::cli {

struct PresetModel {
  std::string name;
  DefenseKind defense = DefenseKind::Unsecured;
  AttackConfig train_attack = NoAttack{};
};

struct PresetCell {
  std::string model;
  AttackConfig attack;
  std::size_t n_samples = 0;
};

struct PresetTransfer {
  std::string source;
  std::string target;
  AttackConfig attack;
  std::size_t n_samples = 0;
};

struct Preset {
  std::string name;
  bool informational = false;
  RunConfig base;  // dataset, architecture, schedule and seeds; defense and attack come from each model
  std::vector<PresetModel> models;
  std::vector<PresetCell> cells;
  std::vector<PresetTransfer> transfers;
};

/// "toy", "mnist" or "cifar10".
Preset make_preset(const std::string& name);
nlohmann::json preset_plan(const Preset& preset);

/// The run configuration that trains one model of the preset.
RunConfig preset_model_config(const Preset& preset, const PresetModel& model);

struct PresetRun {
  EvalReport report;
  DatasetPair data;
  std::vector<std::pair<std::string, TrainedModel>> models;

  const TrainedModel& model(const std::string& name) const;
};

struct PresetRunOptions {
  int workers = 1;
  std::ostream* log = nullptr;
};

/// Trains every model, evaluates every cell and transfer, and writes
/// plan.json, checkpoints/, logs/, report.json and report.csv under `out`.
PresetRun run_preset(const Preset& preset, const std::filesystem::path& out, const PresetRunOptions& options = {});

}  // namespace targetforge::cli
