#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "targetforge/network.hpp"

namespace targetforge {

struct ModelSpec {
  std::string architecture = "custom";  // "mnist", "cifar10" or "custom"
  std::vector<LayerKind> layers;
  Shape input_shape;                    // (H, W, C)
  std::size_t base_classes = 10;
  int class_multiplier = 1;

  std::size_t num_outputs() const { return base_classes * static_cast<std::size_t>(class_multiplier); }
};

struct ArchitectureOptions {
  Shape input_shape;          // empty selects the dataset's native shape
  std::size_t base_classes = 10;
  std::size_t width_divisor = 1;  // divides every conv/dense width, for scaled-down variants
};

ModelSpec build_mnist_spec(int multiplier, const ArchitectureOptions& options = {});
ModelSpec build_cifar_spec(int multiplier, const ArchitectureOptions& options = {});

/// Throws ConfigError listing every problem.
void validate_spec(const ModelSpec& spec);

nlohmann::json layer_to_json(const LayerKind& layer);
LayerKind layer_from_json(const nlohmann::json& j);
nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

class TrainedModel {
 public:
  TrainedModel() = default;
  /// Freshly initialized parameters.
  TrainedModel(ModelSpec spec, std::uint64_t init_seed);
  TrainedModel(ModelSpec spec, Network network, nlohmann::json provenance);

  const ModelSpec& spec() const noexcept { return spec_; }
  const Network& network() const noexcept { return network_; }
  Network& network() noexcept { return network_; }
  const nlohmann::json& provenance() const noexcept { return provenance_; }
  nlohmann::json& provenance() noexcept { return provenance_; }

  std::size_t base_classes() const noexcept { return spec_.base_classes; }
  int multiplier() const noexcept { return spec_.class_multiplier; }
  std::size_t num_outputs() const noexcept { return spec_.num_outputs(); }

 private:
  ModelSpec spec_;
  Network network_;
  nlohmann::json provenance_ = nlohmann::json::object();
};

/// Eval-mode softmax output, batch x (k * multiplier).
Tensor predict_probs(const TrainedModel& model, const Tensor& batch, int workers = 1);

/// argmax over i in [0, k) of sum_j probs[i + j*k]; lowest index wins ties.
std::vector<int> infer_class_from_probs(const Tensor& probs, std::size_t base_classes, int multiplier);
std::vector<int> infer_class(const TrainedModel& model, const Tensor& batch, int workers = 1);

}  // namespace targetforge
