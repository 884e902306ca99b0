#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <set>

#include "targetforge/attacks.hpp"
#include "targetforge/container.hpp"
#include "targetforge/digest.hpp"
#include "targetforge/error.hpp"

namespace targetforge {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

std::string norm_name(Norm n) { return n == Norm::L2 ? "l2" : "linf"; }

Norm parse_norm(const std::string& s, std::vector<std::string>& problems) {
  if (s == "l2") return Norm::L2;
  if (s == "linf") return Norm::Linf;
  problems.push_back("unknown norm '" + s + "' (expected l2 or linf)");
  return Norm::L2;
}

// Reads typed fields with defaults and records unknown keys and type errors.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::vector<std::string>& problems) : j_(j), problems_(problems) {
    seen_.insert("type");
  }

  template <typename T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      problems_.push_back(std::string("field '") + key + "' has the wrong type");
    }
  }

  void read_norm(Norm& field) {
    std::string text = norm_name(field);
    read("norm", text);
    field = parse_norm(text, problems_);
  }

  void finish(const std::string& type) {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) problems_.push_back("unknown field '" + key + "' for attack '" + type + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

}  // namespace

std::string attack_name(const AttackConfig& config) {
  return std::visit(Overloaded{
                        [](const NoAttack&) { return std::string("none"); },
                        [](const Fgsm&) { return std::string("fgsm"); },
                        [](const Bim&) { return std::string("bim"); },
                        [](const Pgd&) { return std::string("pgd"); },
                        [](const CarliniWagner& c) { return std::string(c.norm == Norm::L2 ? "cw_l2" : "cw_linf"); },
                        [](const DeepFool&) { return std::string("deepfool"); },
                        [](const Zoo&) { return std::string("zoo"); },
                        [](const Uap&) { return std::string("uap"); },
                    },
                    config);
}

void validate_attack(const AttackConfig& config) {
  std::vector<std::string> p;
  const std::string name = attack_name(config);
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) p.push_back(name + ": " + what);
  };
  std::visit(Overloaded{
                 [](const NoAttack&) {},
                 [&](const Fgsm& c) { need(c.epsilon >= 0.0f, "epsilon must be >= 0"); },
                 [&](const Bim& c) {
                   need(c.epsilon >= 0.0f, "epsilon must be >= 0");
                   need(c.alpha > 0.0f, "alpha must be > 0");
                   need(c.steps >= 1, "steps must be >= 1");
                 },
                 [&](const Pgd& c) {
                   need(c.epsilon >= 0.0f, "epsilon must be >= 0");
                   need(c.alpha > 0.0f, "alpha must be > 0");
                   need(c.steps >= 1, "steps must be >= 1");
                 },
                 [&](const CarliniWagner& c) {
                   need(c.kappa >= 0.0f, "kappa must be >= 0");
                   need(c.max_iterations >= 1, "max_iterations must be >= 1");
                   need(c.binary_search_steps >= 1, "binary_search_steps must be >= 1");
                   need(c.initial_const > 0.0f, "initial_const must be > 0");
                   need(c.learning_rate > 0.0f, "learning_rate must be > 0");
                 },
                 [&](const DeepFool& c) {
                   need(c.max_iterations >= 1, "max_iterations must be >= 1");
                   need(c.overshoot >= 0.0f, "overshoot must be >= 0");
                   need(c.candidates >= 2, "candidates must be >= 2");
                 },
                 [&](const Zoo& c) {
                   need(c.max_iterations >= 1, "max_iterations must be >= 1");
                   need(c.initial_const > 0.0f, "initial_const must be > 0");
                   need(c.coord_batch >= 1, "coord_batch must be >= 1");
                   need(c.learning_rate > 0.0f, "learning_rate must be > 0");
                   need(c.binary_search_steps >= 1, "binary_search_steps must be >= 1");
                   need(c.kappa >= 0.0f, "kappa must be >= 0");
                   need(c.step > 0.0f, "step must be > 0");
                 },
                 [&](const Uap& c) {
                   need(c.max_outer_iterations >= 1, "max_outer_iterations must be >= 1");
                   need(c.per_sample_max_iter >= 1, "per_sample_max_iter must be >= 1");
                   need(c.xi >= 0.0f, "xi must be >= 0");
                   need(c.overshoot >= 0.0f, "overshoot must be >= 0");
                   need(c.delta >= 0.0f && c.delta < 1.0f, "delta must be in [0, 1)");
                   need(c.train_samples >= 1, "train_samples must be >= 1");
                 },
             },
             config);
  if (!p.empty()) throw ConfigError(std::move(p));
}

namespace {

// Every floating field is a float; print it as its shortest float spelling.
double shortest(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, static_cast<float>(v));
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

nlohmann::json attack_fields(const AttackConfig& config);

}  // namespace

nlohmann::json attack_to_json(const AttackConfig& config) {
  nlohmann::json j = attack_fields(config);
  for (auto& [key, value] : j.items()) {
    if (value.is_number_float()) value = shortest(value.get<double>());
  }
  return j;
}

namespace {

nlohmann::json attack_fields(const AttackConfig& config) {
  return std::visit(
      Overloaded{
          [](const NoAttack&) { return nlohmann::json{{"type", "none"}}; },
          [](const Fgsm& c) { return nlohmann::json{{"type", "fgsm"}, {"epsilon", c.epsilon}}; },
          [](const Bim& c) {
            return nlohmann::json{{"type", "bim"}, {"epsilon", c.epsilon}, {"alpha", c.alpha}, {"steps", c.steps}};
          },
          [](const Pgd& c) {
            return nlohmann::json{{"type", "pgd"},     {"epsilon", c.epsilon},          {"alpha", c.alpha},
                                  {"steps", c.steps}, {"random_start", c.random_start}};
          },
          [](const CarliniWagner& c) {
            return nlohmann::json{{"type", "cw"},
                                  {"norm", norm_name(c.norm)},
                                  {"kappa", c.kappa},
                                  {"max_iterations", c.max_iterations},
                                  {"binary_search_steps", c.binary_search_steps},
                                  {"initial_const", c.initial_const},
                                  {"learning_rate", c.learning_rate},
                                  {"abort_early", c.abort_early}};
          },
          [](const DeepFool& c) {
            return nlohmann::json{{"type", "deepfool"},
                                  {"max_iterations", c.max_iterations},
                                  {"overshoot", c.overshoot},
                                  {"candidates", c.candidates}};
          },
          [](const Zoo& c) {
            return nlohmann::json{{"type", "zoo"},
                                  {"max_iterations", c.max_iterations},
                                  {"initial_const", c.initial_const},
                                  {"coord_batch", c.coord_batch},
                                  {"learning_rate", c.learning_rate},
                                  {"binary_search_steps", c.binary_search_steps},
                                  {"kappa", c.kappa},
                                  {"step", c.step},
                                  {"abort_early", c.abort_early}};
          },
          [](const Uap& c) {
            return nlohmann::json{{"type", "uap"},
                                  {"max_outer_iterations", c.max_outer_iterations},
                                  {"per_sample_max_iter", c.per_sample_max_iter},
                                  {"xi", c.xi},
                                  {"norm", norm_name(c.norm)},
                                  {"overshoot", c.overshoot},
                                  {"delta", c.delta},
                                  {"train_samples", c.train_samples}};
          },
      },
      config);
}

}  // namespace

AttackConfig attack_from_json(const nlohmann::json& j) {
  std::vector<std::string> problems;
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
    throw ConfigError({"attack entry must be an object with a string 'type'"});
  }
  const std::string type = j["type"].get<std::string>();
  FieldReader r(j, problems);
  AttackConfig out;
  if (type == "none") {
    out = NoAttack{};
  } else if (type == "fgsm") {
    Fgsm c;
    r.read("epsilon", c.epsilon);
    out = c;
  } else if (type == "bim") {
    Bim c;
    r.read("epsilon", c.epsilon);
    r.read("alpha", c.alpha);
    r.read("steps", c.steps);
    out = c;
  } else if (type == "pgd") {
    Pgd c;
    r.read("epsilon", c.epsilon);
    r.read("alpha", c.alpha);
    r.read("steps", c.steps);
    r.read("random_start", c.random_start);
    out = c;
  } else if (type == "cw") {
    CarliniWagner c;
    r.read_norm(c.norm);
    r.read("kappa", c.kappa);
    r.read("max_iterations", c.max_iterations);
    r.read("binary_search_steps", c.binary_search_steps);
    r.read("initial_const", c.initial_const);
    r.read("learning_rate", c.learning_rate);
    r.read("abort_early", c.abort_early);
    out = c;
  } else if (type == "deepfool") {
    DeepFool c;
    r.read("max_iterations", c.max_iterations);
    r.read("overshoot", c.overshoot);
    r.read("candidates", c.candidates);
    out = c;
  } else if (type == "zoo") {
    Zoo c;
    r.read("max_iterations", c.max_iterations);
    r.read("initial_const", c.initial_const);
    r.read("coord_batch", c.coord_batch);
    r.read("learning_rate", c.learning_rate);
    r.read("binary_search_steps", c.binary_search_steps);
    r.read("kappa", c.kappa);
    r.read("step", c.step);
    r.read("abort_early", c.abort_early);
    out = c;
  } else if (type == "uap") {
    Uap c;
    r.read("max_outer_iterations", c.max_outer_iterations);
    r.read("per_sample_max_iter", c.per_sample_max_iter);
    r.read("xi", c.xi);
    r.read_norm(c.norm);
    r.read("overshoot", c.overshoot);
    r.read("delta", c.delta);
    r.read("train_samples", c.train_samples);
    out = c;
  } else {
    throw ConfigError({"unknown attack type '" + type + "'"});
  }
  r.finish(type);
  try {
    validate_attack(out);
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return out;
}

std::string attack_digest(const AttackConfig& config) {
  return sha256_hex(canonical_json(attack_to_json(config)));
}

double AdvBatch::success_rate() const {
  if (success.empty()) return 0.0;
  return static_cast<double>(std::count(success.begin(), success.end(), 1)) / static_cast<double>(success.size());
}

Tensor QueryModel::query(const Tensor& batch) const {
  queries_.fetch_add(batch.rank() ? batch.dim(0) : 0);
  return predict_probs(*model_, batch);
}

AdvBatch run_attack(const TrainedModel& model, const Tensor& x, std::span<const int> labels,
                    const AttackConfig& config, const AttackOptions& options) {
  validate_attack(config);
  return std::visit(
      Overloaded{
          [&](const NoAttack&) { return apply_perturbation(model, x, labels, Tensor(), options.workers); },
          [&](const Fgsm& c) { return fgsm(model, x, labels, c, options); },
          [&](const Bim& c) { return bim(model, x, labels, c, options); },
          [&](const Pgd& c) { return pgd(model, x, labels, c, options); },
          [&](const CarliniWagner& c) { return carlini_wagner(model, x, labels, c, options); },
          [&](const DeepFool& c) { return deepfool(model, x, labels, c, options); },
          [&](const Zoo& c) {
            QueryModel black_box(model);
            return zoo(black_box, x, labels, c, options);
          },
          [&](const Uap& c) {
            if (!options.train_images) throw Error(ErrorKind::State, "UAP needs training images in AttackOptions");
            UapResult fit = uap_fit(model, *options.train_images, options.train_labels, c, options);
            return apply_perturbation(model, x, labels, fit.perturbation, options.workers);
          },
      },
      config);
}

}  // namespace targetforge
