#include "targetforge/training.hpp"

#include <cmath>
#include <sstream>

#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

namespace targetforge {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kDropoutStream = 3;
constexpr std::uint64_t kAttackStream = 4;

const char* const kDefenseNames[] = {"unsecured", "target_clean", "target_adv", "adv_train", "target_combined"};

}  // namespace

std::string defense_name(DefenseKind defense) { return kDefenseNames[static_cast<int>(defense)]; }

DefenseKind parse_defense(const std::string& name) {
  for (int i = 0; i < 5; ++i) {
    if (name == kDefenseNames[i]) return static_cast<DefenseKind>(i);
  }
  throw ConfigError({"unknown defense '" + name +
                     "' (expected unsecured, target_clean, target_adv, adv_train or target_combined)"});
}

int required_multiplier(DefenseKind defense) {
  switch (defense) {
    case DefenseKind::TargetClean:
    case DefenseKind::TargetAdv: return 2;
    case DefenseKind::TargetCombined: return 3;
    default: return 1;
  }
}

bool uses_attack(DefenseKind defense) {
  return defense == DefenseKind::TargetAdv || defense == DefenseKind::AdvTrain ||
         defense == DefenseKind::TargetCombined;
}

void validate_train_config(const TrainConfig& c, const ModelSpec& spec) {
  std::vector<std::string> p;
  if (c.epochs < 1) p.push_back("epochs must be >= 1");
  if (c.batch_size < 1) p.push_back("batch_size must be >= 1");
  if (!(c.optimizer.learning_rate >= 0.0)) p.push_back("learning_rate must be >= 0");
  if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0)) p.push_back("beta1 must be in [0, 1)");
  if (!(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0)) p.push_back("beta2 must be in [0, 1)");
  if (!(c.optimizer.epsilon > 0.0)) p.push_back("optimizer epsilon must be > 0");
  if (c.train_attack_iterations < 1) p.push_back("train_attack_iterations must be >= 1");
  int need = required_multiplier(c.defense);
  if (spec.class_multiplier != need) {
    p.push_back("defense " + defense_name(c.defense) + " needs class multiplier " + std::to_string(need) +
                " but the model spec has " + std::to_string(spec.class_multiplier));
  }
  if (uses_attack(c.defense) && std::holds_alternative<Uap>(c.attack)) {
    p.push_back("UAP cannot be used as a training attack");
  }
  try {
    validate_attack(c.attack);
  } catch (const ConfigError& e) {
    p.insert(p.end(), e.problems().begin(), e.problems().end());
  }
  if (!p.empty()) throw ConfigError(std::move(p));
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.optimizer.learning_rate},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"epsilon", c.optimizer.epsilon},
          {"seed", c.seed},
          {"defense", defense_name(c.defense)},
          {"attack", attack_to_json(c.attack)},
          {"train_attack_iterations", c.train_attack_iterations}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  std::vector<std::string> p;
  if (!j.is_object()) throw ConfigError({"training section must be an object"});
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      p.push_back(std::string("training.") + key + " has the wrong type");
    }
  };
  static const char* known[] = {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "epsilon",
                                "seed", "defense", "attack", "train_attack_iterations"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      p.push_back("unknown field training." + key);
    }
  }
  read("epochs", c.epochs);
  read("batch_size", c.batch_size);
  read("learning_rate", c.optimizer.learning_rate);
  read("beta1", c.optimizer.beta1);
  read("beta2", c.optimizer.beta2);
  read("epsilon", c.optimizer.epsilon);
  read("seed", c.seed);
  read("train_attack_iterations", c.train_attack_iterations);
  if (j.contains("defense")) {
    try {
      c.defense = parse_defense(j["defense"].get<std::string>());
    } catch (const ConfigError& e) {
      p.insert(p.end(), e.problems().begin(), e.problems().end());
    } catch (const nlohmann::json::exception&) {
      p.push_back("training.defense must be a string");
    }
  }
  if (j.contains("attack")) {
    try {
      c.attack = attack_from_json(j["attack"]);
    } catch (const ConfigError& e) {
      for (const auto& s : e.problems()) p.push_back("training.attack: " + s);
    }
  }
  if (!p.empty()) throw ConfigError(std::move(p));
  return c;
}

StepResult train_step(TrainedModel& model, const Tensor& images, std::span<const int> labels, OptimizerState& state,
                      const AdamConfig& config, std::uint64_t dropout_seed) {
  Network& net = model.network();
  PassRecord rec = net.forward(images, {Mode::Train, dropout_seed});
  StepResult r;
  r.samples = labels.size();
  r.data_loss = loss_forward(rec.logits(), labels);
  r.regularization = net.regularization_loss();
  r.loss = r.data_loss + r.regularization;
  if (!std::isfinite(r.loss)) {
    std::ostringstream msg;
    msg << "non-finite training loss at step " << state.step + 1 << " (data loss " << r.data_loss << ", regularizer "
        << r.regularization << ", logits finite: " << (rec.logits().all_finite() ? "yes" : "no") << ")";
    throw Error(ErrorKind::Numeric, msg.str());
  }
  Gradients g = net.backward(rec, loss_backward(rec.logits(), labels), GradientScope::ParametersAndInput);
  net.update_running_statistics(rec);

  const std::size_t layers = net.layers().size();
  if (state.m.size() != layers) {
    state.m.assign(layers, {});
    state.v.assign(layers, {});
    for (std::size_t i = 0; i < layers; ++i) {
      for (const Tensor& p : net.states()[i].params) {
        state.m[i].emplace_back(p.shape());
        state.v[i].emplace_back(p.shape());
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double lr_t = config.learning_rate * std::sqrt(1.0 - std::pow(config.beta2, t)) /
                      (1.0 - std::pow(config.beta1, t));
  for (std::size_t i = 0; i < layers; ++i) {
    if (net.states()[i].params.empty()) continue;
    LayerState& s = net.mutable_state(i);
    for (std::size_t p = 0; p < s.params.size(); ++p) {
      float* w = s.params[p].data();
      const float* grad = g.params[i][p].data();
      float* m = state.m[i][p].data();
      float* v = state.v[i][p].data();
      for (std::size_t k = 0; k < s.params[p].size(); ++k) {
        m[k] = static_cast<float>(config.beta1 * m[k] + (1.0 - config.beta1) * grad[k]);
        v[k] = static_cast<float>(config.beta2 * v[k] + (1.0 - config.beta2) * static_cast<double>(grad[k]) * grad[k]);
        w[k] = static_cast<float>(w[k] - lr_t * m[k] / (std::sqrt(static_cast<double>(v[k])) + config.epsilon));
      }
    }
  }
  return r;
}

TrainingBatch build_training_batch(const TrainedModel& model, const TrainConfig& config, const Tensor& x,
                                   std::span<const int> y, std::uint64_t attack_seed) {
  const int k = static_cast<int>(model.base_classes());
  TrainingBatch out;
  auto shifted = [&](int offset) {
    std::vector<int> l(y.begin(), y.end());
    for (int& v : l) v += offset;
    return l;
  };
  auto append = [](std::vector<int>& dst, const std::vector<int>& src) { dst.insert(dst.end(), src.begin(), src.end()); };

  Tensor adversarial;
  if (uses_attack(config.defense)) {
    AttackConfig attack = config.attack;
    if (auto* cw = std::get_if<CarliniWagner>(&attack)) cw->max_iterations = config.train_attack_iterations;
    AttackOptions opts;
    opts.seed = attack_seed;
    opts.workers = config.workers;
    AdvBatch adv = run_attack(model, x, y, attack, opts);
    adversarial = std::move(adv.adversarial);
    const std::size_t d = x.row_size();
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      auto row = adversarial.row(i);
      bool finite = std::all_of(row.begin(), row.end(), [](float v) { return std::isfinite(v); });
      if (!finite) {
        std::copy_n(x.data() + i * d, d, row.data());
        ++out.attack_fallbacks;
      } else if (!adv.success[i]) {
        ++out.attack_unsuccessful;
      }
    }
  }

  out.labels.assign(y.begin(), y.end());
  switch (config.defense) {
    case DefenseKind::Unsecured:
      out.images = x;
      break;
    case DefenseKind::TargetClean:
      out.images = Tensor::concat_rows({&x, &x});
      append(out.labels, shifted(k));
      break;
    case DefenseKind::TargetAdv:
      out.images = Tensor::concat_rows({&x, &adversarial});
      append(out.labels, shifted(k));
      break;
    case DefenseKind::AdvTrain:
      out.images = Tensor::concat_rows({&x, &adversarial});
      append(out.labels, shifted(0));
      break;
    case DefenseKind::TargetCombined:
      out.images = Tensor::concat_rows({&x, &x, &adversarial});
      append(out.labels, shifted(k));
      append(out.labels, shifted(2 * k));
      break;
  }
  return out;
}

nlohmann::json epoch_to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"steps", m.steps},
          {"samples", m.samples},
          {"loss", m.loss},
          {"clean_accuracy", m.clean_accuracy},
          {"attack_fallbacks", m.attack_fallbacks},
          {"attack_unsuccessful", m.attack_unsuccessful}};
}

TrainResult train_model(const ModelSpec& spec, const Dataset& train, const TrainConfig& config,
                        const TrainCallbacks& callbacks, const Dataset* eval) {
  validate_spec(spec);
  validate_train_config(config, spec);
  if (train.num_classes != spec.base_classes) {
    throw ConfigError({"dataset has " + std::to_string(train.num_classes) + " classes but the model expects " +
                       std::to_string(spec.base_classes)});
  }
  if (train.sample_shape() != spec.input_shape) {
    throw ShapeError(0, spec.input_shape, train.sample_shape(), "dataset sample shape does not match the model");
  }
  const Dataset& eval_set = eval ? *eval : train;

  TrainResult result{TrainedModel(spec, mix_seed(config.seed, kInitStream)), {}};
  TrainedModel& model = result.model;
  OptimizerState opt;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    BatchStream stream(train, config.batch_size, mix_seed(mix_seed(config.seed, kShuffleStream), epoch));
    EpochMetrics metrics;
    metrics.epoch = epoch + 1;
    double loss_sum = 0.0;
    Batch batch;
    while (stream.next(batch)) {
      std::uint64_t step = opt.step;
      TrainingBatch tb = build_training_batch(model, config, batch.images, batch.labels,
                                              mix_seed(mix_seed(config.seed, kAttackStream), step));
      StepResult r = train_step(model, tb.images, tb.labels, opt, config.optimizer,
                                mix_seed(mix_seed(config.seed, kDropoutStream), step));
      if (callbacks.on_step) callbacks.on_step(StepInfo{epoch + 1, step, tb.images, tb.labels, r, model});
      loss_sum += r.loss * static_cast<double>(r.samples);
      metrics.samples += r.samples;
      ++metrics.steps;
      metrics.attack_fallbacks += tb.attack_fallbacks;
      metrics.attack_unsuccessful += tb.attack_unsuccessful;
    }
    metrics.loss = metrics.samples ? loss_sum / static_cast<double>(metrics.samples) : 0.0;
    std::vector<int> pred = infer_class(model, eval_set.images, config.workers);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == eval_set.labels[i];
    metrics.clean_accuracy = pred.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pred.size());
    result.history.push_back(metrics);
    if (callbacks.on_epoch) callbacks.on_epoch(metrics);
  }
  model.provenance() = {{"defense", defense_name(config.defense)},
                        {"training", train_config_to_json(config)},
                        {"dataset", train.name},
                        {"init_seed", mix_seed(config.seed, kInitStream)},
                        {"steps", opt.step}};
  return result;
}

namespace {

TrainResult run_defense(DefenseKind defense, const ModelSpec& spec, const Dataset& train, TrainConfig config,
                        const TrainCallbacks& callbacks, const Dataset* eval) {
  config.defense = defense;
  return train_model(spec, train, config, callbacks, eval);
}

}  // namespace

TrainResult target_train_clean(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                               const TrainCallbacks& callbacks, const Dataset* eval) {
  return run_defense(DefenseKind::TargetClean, spec, train, std::move(config), callbacks, eval);
}

TrainResult target_train_adv(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                             const TrainCallbacks& callbacks, const Dataset* eval) {
  return run_defense(DefenseKind::TargetAdv, spec, train, std::move(config), callbacks, eval);
}

TrainResult adversarial_train(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                              const TrainCallbacks& callbacks, const Dataset* eval) {
  return run_defense(DefenseKind::AdvTrain, spec, train, std::move(config), callbacks, eval);
}

TrainResult target_train_combined(const ModelSpec& spec, const Dataset& train, TrainConfig config,
                                  const TrainCallbacks& callbacks, const Dataset* eval) {
  return run_defense(DefenseKind::TargetCombined, spec, train, std::move(config), callbacks, eval);
}

}  // namespace targetforge
