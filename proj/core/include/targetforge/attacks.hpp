#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "targetforge/model.hpp"

namespace targetforge {

enum class Norm { L2, Linf };

/// Identity attack; returns the inputs unchanged.
struct NoAttack {};

struct Fgsm {
  float epsilon = 0.3f;
};

struct Bim {
  float epsilon = 0.3f;
  float alpha = 0.01f;
  int steps = 40;
};

struct Pgd {
  float epsilon = 0.3f;
  float alpha = 0.01f;
  int steps = 40;
  bool random_start = true;
};

struct CarliniWagner {
  Norm norm = Norm::L2;
  float kappa = 0.0f;
  int max_iterations = 1000;
  int binary_search_steps = 9;
  float initial_const = 1e-3f;
  float learning_rate = 1e-2f;
  bool abort_early = true;
};

struct DeepFool {
  int max_iterations = 50;
  float overshoot = 0.02f;
  int candidates = 10;
};

struct Zoo {
  int max_iterations = 1000;
  float initial_const = 0.01f;
  int coord_batch = 128;
  float learning_rate = 1e-2f;
  int binary_search_steps = 1;
  float kappa = 0.0f;
  float step = 1e-4f;
  bool abort_early = true;
};

struct Uap {
  int max_outer_iterations = 10;
  int per_sample_max_iter = 50;
  float xi = 0.3f;
  Norm norm = Norm::Linf;
  float overshoot = 0.02f;
  float delta = 0.2f;  // stop once the fooling rate reaches 1 - delta
  int train_samples = 1000;
};

using AttackConfig = std::variant<NoAttack, Fgsm, Bim, Pgd, CarliniWagner, DeepFool, Zoo, Uap>;

/// Short identifier such as "fgsm", "cw_l2", "cw_linf".
std::string attack_name(const AttackConfig& config);
void validate_attack(const AttackConfig& config);
nlohmann::json attack_to_json(const AttackConfig& config);
AttackConfig attack_from_json(const nlohmann::json& j);
/// SHA-256 hex of the canonical JSON form.
std::string attack_digest(const AttackConfig& config);

/// Called with (first sample index of the chunk, step, iterate) after every
/// BIM/PGD step. May be invoked concurrently when workers > 1.
using IterateObserver = std::function<void(std::size_t, int, const Tensor&)>;

struct AttackOptions {
  std::uint64_t seed = 0;
  int workers = 1;
  IterateObserver on_iterate;
  // UAP draws its perturbation from these.
  const Tensor* train_images = nullptr;
  std::span<const int> train_labels;
};

struct AdvBatch {
  Tensor adversarial;
  std::vector<std::size_t> source_indices;
  std::vector<int> labels;
  std::vector<float> l2;
  std::vector<float> linf;
  std::vector<std::uint8_t> success;    // raw argmax over all outputs differs from the label
  std::vector<std::uint8_t> converged;  // the attack's own stopping criterion was met
  std::vector<int> iterations;

  std::size_t size() const noexcept { return labels.size(); }
  double success_rate() const;
};

AdvBatch fgsm(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const Fgsm& cfg,
              const AttackOptions& options = {});
AdvBatch bim(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const Bim& cfg,
             const AttackOptions& options = {});
AdvBatch pgd(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const Pgd& cfg,
             const AttackOptions& options = {});
AdvBatch carlini_wagner(const TrainedModel& model, const Tensor& x, std::span<const int> labels,
                        const CarliniWagner& cfg, const AttackOptions& options = {});
AdvBatch deepfool(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const DeepFool& cfg,
                  const AttackOptions& options = {});

/// Probability-only view of a model that counts every queried sample.
class QueryModel {
 public:
  explicit QueryModel(const TrainedModel& model) : model_(&model) {}

  Tensor query(const Tensor& batch) const;
  std::uint64_t queries() const noexcept { return queries_.load(); }
  void reset_queries() noexcept { queries_.store(0); }
  const Shape& input_shape() const noexcept { return model_->spec().input_shape; }
  std::size_t num_outputs() const noexcept { return model_->num_outputs(); }

 private:
  const TrainedModel* model_;
  mutable std::atomic<std::uint64_t> queries_{0};
};

/// Symmetric-difference estimate of d loss / d point[c] for each c in `coords`.
/// `batch_loss` receives 2 * coords.size() probes (plus then minus for each
/// coordinate, clipped to [0, 1]) and returns one loss per probe.
std::vector<double> zoo_coordinate_gradient(
    const std::function<std::vector<double>(const Tensor& probes)>& batch_loss, const Tensor& point,
    std::span<const std::size_t> coords, double step);

AdvBatch zoo(const QueryModel& model, const Tensor& x, std::span<const int> labels, const Zoo& cfg,
             const AttackOptions& options = {});

struct UapResult {
  Tensor perturbation;  // single sample shape (1, H, W, C)
  std::vector<float> linf_history;
  std::vector<float> l2_history;
  double fooling_rate = 0.0;
  int outer_iterations = 0;
};

UapResult uap_fit(const TrainedModel& model, const Tensor& train_x, std::span<const int> train_labels,
                  const Uap& cfg, const AttackOptions& options = {});
/// clip(x + v, 0, 1) for every sample.
AdvBatch apply_perturbation(const TrainedModel& model, const Tensor& x, std::span<const int> labels,
                            const Tensor& perturbation, int workers = 1);

/// Dispatches on the config; UAP needs options.train_images.
AdvBatch run_attack(const TrainedModel& model, const Tensor& x, std::span<const int> labels,
                    const AttackConfig& config, const AttackOptions& options = {});

}  // namespace targetforge
