#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "targetforge/attacks.hpp"
#include "targetforge/data.hpp"
#include "targetforge/model.hpp"

namespace targetforge {

/// n distinct indices of [0, size) in ascending order; all of them when n >= size.
std::vector<std::size_t> select_samples(std::size_t size, std::size_t n, std::uint64_t seed);

/// 1000 for CW, 200 for ZOO, the whole set otherwise.
std::size_t default_sample_count(const AttackConfig& attack, std::size_t test_size);

double accuracy(std::span<const int> predicted, std::span<const int> labels);
double clean_accuracy(const TrainedModel& model, const Dataset& data, int workers = 1);

/// Fraction of adversarial samples whose inferred class equals the label.
double robust_accuracy(const TrainedModel& model, const AdvBatch& batch, int workers = 1);

/// Among successful samples, the fraction whose raw argmax is label + k.
/// Empty when nothing succeeded; throws for multiplier-1 models.
std::optional<double> designated_class_rate(const TrainedModel& model, const AdvBatch& batch, int workers = 1);

/// Throws unless both models share input shape and base class count.
void check_transfer_compatible(const TrainedModel& source, const TrainedModel& target);

struct ReportEntry {
  std::string model;
  std::string attack;
  nlohmann::json attack_config;
  std::string attack_digest;
  std::size_t n_samples = 0;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  std::optional<double> designated_class_rate;
  double success_rate = 0.0;
  double mean_l2 = 0.0;
  double mean_linf = 0.0;

  friend bool operator==(const ReportEntry&, const ReportEntry&) = default;
};

struct TransferEntry {
  std::string source_model;
  std::string target_model;
  std::string attack;
  std::string attack_digest;
  std::size_t n_samples = 0;
  double accuracy = 0.0;

  friend bool operator==(const TransferEntry&, const TransferEntry&) = default;
};

struct EvalReport {
  std::string title;
  bool informational = false;
  nlohmann::json provenance = nlohmann::json::object();
  std::vector<ReportEntry> entries;
  std::vector<TransferEntry> transfers;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
std::string report_csv(const EvalReport& report);

enum class ReportFormat { Json, Csv };
void emit_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);

struct EvalOptions {
  std::size_t n_samples = 0;  // 0 selects default_sample_count
  std::uint64_t seed = 0;
  int workers = 1;
  const Dataset* train = nullptr;  // UAP fitting set
};

/// Attacks a seeded sample of `test` and summarizes it. `kept` receives the adversarial batch.
ReportEntry evaluate_attack(const TrainedModel& model, const std::string& model_name, const Dataset& test,
                            const AttackConfig& attack, const EvalOptions& options = {}, AdvBatch* kept = nullptr);

/// Samples crafted against `source`, scored with `target`'s decision rule.
TransferEntry evaluate_transfer(const TrainedModel& source, const std::string& source_name,
                                const TrainedModel& target, const std::string& target_name, const Dataset& test,
                                const AttackConfig& attack, const EvalOptions& options = {});

}  // namespace targetforge
