#include "targetforge/evaluation.hpp"

#include <algorithm>
#include <cstdio>

#include "targetforge/container.hpp"
#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

namespace targetforge {

std::vector<std::size_t> select_samples(std::size_t size, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> out;
  if (n >= size) {
    out.resize(size);
    for (std::size_t i = 0; i < size; ++i) out[i] = i;
    return out;
  }
  Rng rng(mix_seed(seed, 0x5e1ec7));
  out = rng.sample_without_replacement(size, n);
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t default_sample_count(const AttackConfig& attack, std::size_t test_size) {
  if (std::holds_alternative<CarliniWagner>(attack)) return std::min<std::size_t>(1000, test_size);
  if (std::holds_alternative<Zoo>(attack)) return std::min<std::size_t>(200, test_size);
  return test_size;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) {
    throw ShapeError(-1, {labels.size()}, {predicted.size()}, "prediction count does not match label count");
  }
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double clean_accuracy(const TrainedModel& model, const Dataset& data, int workers) {
  return accuracy(infer_class(model, data.images, workers), data.labels);
}

double robust_accuracy(const TrainedModel& model, const AdvBatch& batch, int workers) {
  return accuracy(infer_class(model, batch.adversarial, workers), batch.labels);
}

std::optional<double> designated_class_rate(const TrainedModel& model, const AdvBatch& batch, int workers) {
  if (model.multiplier() < 2) {
    throw Error(ErrorKind::State, "designated-class rate is undefined for a model without designated classes");
  }
  std::vector<int> raw = row_argmax(predict_probs(model, batch.adversarial, workers));
  const int k = static_cast<int>(model.base_classes());
  std::size_t successes = 0, designated = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch.success[i]) continue;
    ++successes;
    designated += raw[i] == batch.labels[i] + k;
  }
  if (successes == 0) return std::nullopt;
  return static_cast<double>(designated) / static_cast<double>(successes);
}

void check_transfer_compatible(const TrainedModel& source, const TrainedModel& target) {
  if (source.spec().input_shape != target.spec().input_shape) {
    throw ShapeError(0, target.spec().input_shape, source.spec().input_shape,
                     "source and target models take different input shapes");
  }
  if (source.base_classes() != target.base_classes()) {
    throw ConfigError({"source model has " + std::to_string(source.base_classes()) + " base classes, target has " +
                       std::to_string(target.base_classes())});
  }
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

AdvBatch attack_subset(const TrainedModel& model, const Dataset& test, const AttackConfig& attack,
                       const EvalOptions& options, std::vector<std::size_t>& picked) {
  std::size_t n = options.n_samples ? options.n_samples : default_sample_count(attack, test.size());
  picked = select_samples(test.size(), n, options.seed);
  Dataset sub = test.subset(picked);
  AttackOptions ao;
  ao.seed = options.seed;
  ao.workers = options.workers;
  if (options.train) {
    ao.train_images = &options.train->images;
    ao.train_labels = options.train->labels;
  }
  AdvBatch adv = run_attack(model, sub.images, sub.labels, attack, ao);
  adv.source_indices = picked;
  return adv;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"model", e.model},
                       {"attack", e.attack},
                       {"attack_config", e.attack_config},
                       {"attack_digest", e.attack_digest},
                       {"n_samples", e.n_samples},
                       {"clean_accuracy", e.clean_accuracy},
                       {"robust_accuracy", e.robust_accuracy},
                       {"designated_class_rate", optional_json(e.designated_class_rate)},
                       {"success_rate", e.success_rate},
                       {"mean_l2", e.mean_l2},
                       {"mean_linf", e.mean_linf}});
  }
  nlohmann::json transfers = nlohmann::json::array();
  for (const auto& t : r.transfers) {
    transfers.push_back({{"source_model", t.source_model},
                         {"target_model", t.target_model},
                         {"attack", t.attack},
                         {"attack_digest", t.attack_digest},
                         {"n_samples", t.n_samples},
                         {"accuracy", t.accuracy}});
  }
  return {{"title", r.title},
          {"informational", r.informational},
          {"provenance", r.provenance},
          {"entries", entries},
          {"transfers", transfers}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.title = j.at("title").get<std::string>();
    r.informational = j.at("informational").get<bool>();
    r.provenance = j.at("provenance");
    for (const auto& e : j.at("entries")) {
      ReportEntry x;
      x.model = e.at("model").get<std::string>();
      x.attack = e.at("attack").get<std::string>();
      x.attack_config = e.at("attack_config");
      x.attack_digest = e.at("attack_digest").get<std::string>();
      x.n_samples = e.at("n_samples").get<std::size_t>();
      x.clean_accuracy = e.at("clean_accuracy").get<double>();
      x.robust_accuracy = e.at("robust_accuracy").get<double>();
      if (!e.at("designated_class_rate").is_null()) x.designated_class_rate = e["designated_class_rate"].get<double>();
      x.success_rate = e.at("success_rate").get<double>();
      x.mean_l2 = e.at("mean_l2").get<double>();
      x.mean_linf = e.at("mean_linf").get<double>();
      r.entries.push_back(std::move(x));
    }
    for (const auto& t : j.at("transfers")) {
      r.transfers.push_back({t.at("source_model").get<std::string>(), t.at("target_model").get<std::string>(),
                             t.at("attack").get<std::string>(), t.at("attack_digest").get<std::string>(),
                             t.at("n_samples").get<std::size_t>(), t.at("accuracy").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string report_csv(const EvalReport& r) {
  std::string out =
      "kind,model,target_model,attack,attack_digest,n_samples,clean_accuracy,robust_accuracy,"
      "designated_class_rate,success_rate,mean_l2,mean_linf\n";
  for (const auto& e : r.entries) {
    out += "attack," + csv_field(e.model) + ",," + csv_field(e.attack) + "," + e.attack_digest + "," +
           std::to_string(e.n_samples) + "," + fixed(e.clean_accuracy) + "," + fixed(e.robust_accuracy) + "," +
           (e.designated_class_rate ? fixed(*e.designated_class_rate) : "") + "," + fixed(e.success_rate) + "," +
           fixed(e.mean_l2) + "," + fixed(e.mean_linf) + "\n";
  }
  for (const auto& t : r.transfers) {
    out += "transfer," + csv_field(t.source_model) + "," + csv_field(t.target_model) + "," + csv_field(t.attack) +
           "," + t.attack_digest + "," + std::to_string(t.n_samples) + ",," + fixed(t.accuracy) + ",,,,\n";
  }
  return out;
}

void emit_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format) {
  if (format == ReportFormat::Json) {
    write_file_atomic(path, report_to_json(report).dump(2) + "\n");
  } else {
    write_file_atomic(path, report_csv(report));
  }
}

ReportEntry evaluate_attack(const TrainedModel& model, const std::string& model_name, const Dataset& test,
                            const AttackConfig& attack, const EvalOptions& options, AdvBatch* kept) {
  std::vector<std::size_t> picked;
  AdvBatch adv = attack_subset(model, test, attack, options, picked);
  ReportEntry e;
  e.model = model_name;
  e.attack = attack_name(attack);
  e.attack_config = attack_to_json(attack);
  e.attack_digest = attack_digest(attack);
  e.n_samples = adv.size();
  Dataset clean = test.subset(picked);
  e.clean_accuracy = clean_accuracy(model, clean, options.workers);
  e.robust_accuracy = robust_accuracy(model, adv, options.workers);
  if (model.multiplier() >= 2) e.designated_class_rate = designated_class_rate(model, adv, options.workers);
  e.success_rate = adv.success_rate();
  double l2 = 0.0, linf = 0.0;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    l2 += adv.l2[i];
    linf += adv.linf[i];
  }
  if (adv.size()) {
    e.mean_l2 = l2 / static_cast<double>(adv.size());
    e.mean_linf = linf / static_cast<double>(adv.size());
  }
  if (kept) *kept = std::move(adv);
  return e;
}

TransferEntry evaluate_transfer(const TrainedModel& source, const std::string& source_name,
                                const TrainedModel& target, const std::string& target_name, const Dataset& test,
                                const AttackConfig& attack, const EvalOptions& options) {
  check_transfer_compatible(source, target);
  std::vector<std::size_t> picked;
  AdvBatch adv = attack_subset(source, test, attack, options, picked);
  return {source_name, target_name, attack_name(attack), attack_digest(attack), adv.size(),
          robust_accuracy(target, adv, options.workers)};
}

}  // namespace targetforge
