#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "targetforge/attacks.hpp"
#include "targetforge/data.hpp"
#include "targetforge/model.hpp"
#include "targetforge/training.hpp"

namespace targetforge::cli {

struct DatasetConfig {
  std::string name = "toy";  // toy, mnist or cifar10
  std::string path;          // empty: data_root() / name
  std::uint64_t seed = 0;    // toy generation only
  std::size_t train_size = ToyOptions{}.train_size;
  std::size_t test_size = ToyOptions{}.test_size;
};

struct ModelConfig {
  std::string architecture = "mnist";  // mnist or cifar10
  int multiplier = 0;                  // 0: whatever the defense needs
  std::size_t width_divisor = 1;
};

struct EvalConfig {
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;  // 0: per-attack default
};

struct RunConfig {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  std::vector<AttackConfig> attacks;
  EvalConfig eval;
  std::string output_dir = "out";
};

/// Collects every problem in the document, cross-field checks included, before throwing ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

/// Cross-field checks: paths, architecture, defense/multiplier agreement.
void validate_run_config(const RunConfig& config);

std::filesystem::path dataset_dir(const DatasetConfig& config);
DatasetPair load_datasets(const DatasetConfig& config);
Shape dataset_sample_shape(const DatasetConfig& config);
std::size_t dataset_classes(const DatasetConfig& config);

ModelSpec resolve_spec(const RunConfig& config);

}  // namespace targetforge::cli
