#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "targetforge/attacks.hpp"
#include "targetforge/data.hpp"
#include "targetforge/model.hpp"

namespace targetforge {

enum class DefenseKind { Unsecured, TargetClean, TargetAdv, AdvTrain, TargetCombined };

std::string defense_name(DefenseKind defense);
DefenseKind parse_defense(const std::string& name);
int required_multiplier(DefenseKind defense);
bool uses_attack(DefenseKind defense);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 128;
  AdamConfig optimizer;
  std::uint64_t seed = 0;
  DefenseKind defense = DefenseKind::Unsecured;
  AttackConfig attack = NoAttack{};
  int train_attack_iterations = 100;  // replaces CW max_iterations during training
  int workers = 1;                    // attack fan-out; does not change results
};

/// Throws ConfigError listing every problem, including defense/multiplier mismatches.
void validate_train_config(const TrainConfig& config, const ModelSpec& spec);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct OptimizerState {
  std::vector<std::vector<Tensor>> m, v;
  std::uint64_t step = 0;
};

struct StepResult {
  double loss = 0.0;            // data loss plus regularizer
  double data_loss = 0.0;
  double regularization = 0.0;
  std::size_t samples = 0;
};

/// One Adam update from the gradient of mean cross-entropy plus the kernel regularizer.
StepResult train_step(TrainedModel& model, const Tensor& images, std::span<const int> labels, OptimizerState& state,
                      const AdamConfig& config, std::uint64_t dropout_seed);

struct TrainingBatch {
  Tensor images;
  std::vector<int> labels;
  std::size_t attack_fallbacks = 0;     // non-finite attack outputs replaced by the clean sample
  std::size_t attack_unsuccessful = 0;  // attack samples the model still classified correctly
};

/// The batch a defense trains on for clean samples (x, y):
///   Unsecured      x            | y
///   TargetClean    x, x         | y, y+k
///   TargetAdv      x, A(x)      | y, y+k
///   AdvTrain       x, A(x)      | y, y
///   TargetCombined x, x, A(x)   | y, y+k, y+2k
TrainingBatch build_training_batch(const TrainedModel& model, const TrainConfig& config, const Tensor& x,
                                   std::span<const int> y, std::uint64_t attack_seed);

struct EpochMetrics {
  int epoch = 0;
  std::size_t steps = 0;
  std::size_t samples = 0;
  double loss = 0.0;
  double clean_accuracy = 0.0;
  std::size_t attack_fallbacks = 0;
  std::size_t attack_unsuccessful = 0;
};

nlohmann::json epoch_to_json(const EpochMetrics& metrics);

struct StepInfo {
  int epoch;
  std::uint64_t step;
  const Tensor& images;
  std::span<const int> labels;
  const StepResult& result;
  const TrainedModel& model;
};

struct TrainCallbacks {
  std::function<void(const StepInfo&)> on_step;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  TrainedModel model;
  std::vector<EpochMetrics> history;
};

/// `eval` (optional) is used for the per-epoch clean accuracy; defaults to `train`.
TrainResult train_model(const ModelSpec& spec, const Dataset& train, const TrainConfig& config,
                        const TrainCallbacks& callbacks = {}, const Dataset* eval = nullptr);

// Entry points per procedure; each fixes config.defense and checks the multiplier.
TrainResult target_train_clean(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                               const TrainCallbacks& callbacks = {}, const Dataset* eval = nullptr);
TrainResult target_train_adv(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                             const TrainCallbacks& callbacks = {}, const Dataset* eval = nullptr);
TrainResult adversarial_train(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                              const TrainCallbacks& callbacks = {}, const Dataset* eval = nullptr);
TrainResult target_train_combined(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                                  const TrainCallbacks& callbacks = {}, const Dataset* eval = nullptr);

}  // namespace targetforge
