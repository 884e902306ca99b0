#include "presets.hpp"

#include <chrono>
#include <ostream>

#include "targetforge/checkpoint.hpp"
#include "targetforge/digest.hpp"
#include "targetforge/error.hpp"

namespace targetforge::cli {

namespace {

CarliniWagner cw_l2(float kappa, int iterations) {
  CarliniWagner c;
  c.kappa = kappa;
  c.max_iterations = iterations;
  return c;
}

CarliniWagner cw_linf(int iterations) {
  CarliniWagner c;
  c.norm = Norm::Linf;
  c.max_iterations = iterations;
  return c;
}

Zoo zoo_attack(int iterations) {
  Zoo z;
  z.max_iterations = iterations;
  return z;
}

Pgd pgd_attack(float eps, float alpha, int steps) {
  Pgd p;
  p.epsilon = eps;
  p.alpha = alpha;
  p.steps = steps;
  return p;
}

void add_cells(Preset& p, std::initializer_list<std::string> models, const AttackConfig& attack, std::size_t n = 0) {
  for (const auto& m : models) p.cells.push_back({m, attack, n});
}

Preset toy_preset() {
  Preset p;
  p.name = "toy";
  p.base.dataset.name = "toy";
  p.base.dataset.seed = 7;
  p.base.model.architecture = "mnist";
  p.base.model.width_divisor = 2;
  p.base.train.epochs = 6;
  p.base.train.batch_size = 64;
  p.base.train.seed = 1;
  p.base.eval.seed = 11;

  const Fgsm fgsm{0.1f};
  const Pgd pgd = pgd_attack(0.1f, 0.01f, 20);
  p.models = {{"unsecured", DefenseKind::Unsecured, NoAttack{}},
              {"target_clean", DefenseKind::TargetClean, NoAttack{}},
              {"target_adv_fgsm", DefenseKind::TargetAdv, fgsm},
              {"adv_train_fgsm", DefenseKind::AdvTrain, fgsm}};

  Uap uap;
  uap.xi = 0.2f;
  uap.train_samples = 200;
  uap.max_outer_iterations = 3;
  CarliniWagner linf = cw_linf(20);
  linf.binary_search_steps = 1;
  const std::initializer_list<std::string> plain = {"unsecured", "target_clean"};
  add_cells(p, plain, DeepFool{}, 0);
  add_cells(p, plain, cw_l2(0.0f, 100), 200);
  add_cells(p, {"target_clean"}, cw_l2(0.0f, 400), 200);
  add_cells(p, plain, linf, 50);
  add_cells(p, plain, zoo_attack(100), 50);
  add_cells(p, plain, uap, 0);
  add_cells(p, {"unsecured", "target_clean", "target_adv_fgsm", "adv_train_fgsm"}, fgsm, 0);
  add_cells(p, {"unsecured", "target_clean", "target_adv_fgsm", "adv_train_fgsm"}, pgd, 0);
  for (const AttackConfig& a : {AttackConfig(DeepFool{}), AttackConfig(cw_l2(0.0f, 100)), AttackConfig(pgd)}) {
    p.transfers.push_back({"unsecured", "target_clean", a, 200});
  }
  return p;
}

// Shared by the MNIST and CIFAR-10 presets; only attack strengths differ.
Preset dataset_preset(const std::string& name, const Pgd& pgd, int zoo_iterations, float uap_xi) {
  Preset p;
  p.name = name;
  p.base.dataset.name = name;
  p.base.model.architecture = name;
  p.base.train.epochs = 20;
  p.base.train.batch_size = 128;
  p.base.train.seed = 1;
  p.base.eval.seed = 11;

  const Fgsm fgsm{0.3f};
  const CarliniWagner cw40 = cw_l2(40.0f, 1000);
  p.models = {{"unsecured", DefenseKind::Unsecured, NoAttack{}},
              {"target_clean", DefenseKind::TargetClean, NoAttack{}},
              {"target_adv_pgd", DefenseKind::TargetAdv, pgd},
              {"adv_train_pgd", DefenseKind::AdvTrain, pgd},
              {"target_adv_cw40", DefenseKind::TargetAdv, cw40},
              {"adv_train_cw40", DefenseKind::AdvTrain, cw40},
              {"target_adv_fgsm", DefenseKind::TargetAdv, fgsm},
              {"adv_train_fgsm", DefenseKind::AdvTrain, fgsm}};

  const std::initializer_list<std::string> plain = {"target_clean", "unsecured"};
  for (int iterations : {1000, 10000, 100000}) add_cells(p, plain, cw_l2(0.0f, iterations));
  add_cells(p, plain, cw_linf(1000));
  add_cells(p, plain, DeepFool{});
  add_cells(p, plain, zoo_attack(zoo_iterations));
  Uap uap;
  uap.xi = uap_xi;
  add_cells(p, plain, uap);
  add_cells(p, {"target_adv_cw40", "adv_train_cw40", "unsecured"}, cw40);
  add_cells(p, {"target_adv_pgd", "adv_train_pgd", "unsecured"}, pgd);
  add_cells(p, {"target_adv_fgsm", "adv_train_fgsm", "unsecured"}, fgsm);

  p.transfers = {{"unsecured", "target_clean", cw_l2(0.0f, 1000), 0},
                 {"unsecured", "target_clean", cw_linf(1000), 0},
                 {"unsecured", "target_clean", DeepFool{}, 0},
                 {"unsecured", "target_adv_cw40", cw40, 0},
                 {"unsecured", "target_adv_pgd", pgd, 0}};
  return p;
}

}  // namespace

Preset make_preset(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "mnist") return dataset_preset("mnist", pgd_attack(0.3f, 0.01f, 40), 3000, 0.3f);
  if (name == "cifar10") {
    Preset p = dataset_preset("cifar10", pgd_attack(8.0f / 255.0f, 2.0f / 255.0f, 7), 1000, 10.0f / 255.0f);
    p.base.train.epochs = 50;
    p.informational = true;
    return p;
  }
  throw ConfigError({"unknown preset '" + name + "' (expected toy, mnist or cifar10)"});
}

RunConfig preset_model_config(const Preset& preset, const PresetModel& model) {
  RunConfig c = preset.base;
  c.train.defense = model.defense;
  c.train.attack = model.train_attack;
  c.model.multiplier = required_multiplier(model.defense);
  return c;
}

nlohmann::json preset_plan(const Preset& p) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : p.models) {
    models.push_back({{"name", m.name}, {"config", run_config_to_json(preset_model_config(p, m))}});
  }
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : p.cells) {
    cells.push_back({{"model", c.model}, {"attack", attack_to_json(c.attack)}, {"n_samples", c.n_samples}});
  }
  nlohmann::json transfers = nlohmann::json::array();
  for (const auto& t : p.transfers) {
    transfers.push_back({{"source", t.source},
                         {"target", t.target},
                         {"attack", attack_to_json(t.attack)},
                         {"n_samples", t.n_samples}});
  }
  return {{"preset", p.name},
          {"informational", p.informational},
          {"models", models},
          {"cells", cells},
          {"transfers", transfers}};
}

const TrainedModel& PresetRun::model(const std::string& name) const {
  for (const auto& [n, m] : models) {
    if (n == name) return m;
  }
  throw Error(ErrorKind::State, "preset has no model named " + name);
}

PresetRun run_preset(const Preset& preset, const std::filesystem::path& out, const PresetRunOptions& options) {
  using Clock = std::chrono::steady_clock;
  auto say = [&](const std::string& s) {
    if (options.log) *options.log << s << std::endl;
  };
  auto seconds = [](Clock::time_point t0) {
    return std::to_string(std::chrono::duration<double>(Clock::now() - t0).count()) + "s";
  };
  for (const auto& m : preset.models) validate_run_config(preset_model_config(preset, m));

  PresetRun run;
  run.data = load_datasets(preset.base.dataset);
  std::filesystem::create_directories(out / "checkpoints");
  std::filesystem::create_directories(out / "logs");
  write_file_atomic(out / "plan.json", preset_plan(preset).dump(2) + "\n");

  nlohmann::json checkpoints = nlohmann::json::object();
  for (const auto& m : preset.models) {
    RunConfig c = preset_model_config(preset, m);
    c.train.workers = options.workers;
    auto t0 = Clock::now();
    std::string log;
    TrainCallbacks cb;
    cb.on_epoch = [&](const EpochMetrics& e) {
      log += epoch_to_json(e).dump() + "\n";
      say("  " + m.name + " epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss) +
          " clean accuracy " + std::to_string(e.clean_accuracy));
    };
    TrainResult r = train_model(resolve_spec(c), run.data.train, c.train, cb, &run.data.test);
    std::filesystem::path ckpt = out / "checkpoints" / (m.name + ".tfck");
    save_checkpoint(r.model, ckpt);
    write_file_atomic(out / "logs" / (m.name + ".train.jsonl"), log);
    checkpoints[m.name] = sha256_file(ckpt);
    say("trained " + m.name + " in " + seconds(t0));
    run.models.emplace_back(m.name, std::move(r.model));
  }

  EvalReport& report = run.report;
  report.title = preset.name;
  report.informational = preset.informational;
  report.provenance = {{"preset", preset.name},
                       {"dataset", preset.base.dataset.name},
                       {"eval_seed", preset.base.eval.seed},
                       {"checkpoint_sha256", checkpoints}};
  EvalOptions eo;
  eo.seed = preset.base.eval.seed;
  eo.workers = options.workers;
  eo.train = &run.data.train;
  for (const auto& cell : preset.cells) {
    auto t0 = Clock::now();
    eo.n_samples = cell.n_samples;
    report.entries.push_back(evaluate_attack(run.model(cell.model), cell.model, run.data.test, cell.attack, eo));
    const auto& e = report.entries.back();
    say("evaluated " + cell.model + " / " + e.attack + ": robust accuracy " + std::to_string(e.robust_accuracy) +
        " (" + seconds(t0) + ")");
  }
  for (const auto& t : preset.transfers) {
    auto t0 = Clock::now();
    eo.n_samples = t.n_samples;
    report.transfers.push_back(evaluate_transfer(run.model(t.source), t.source, run.model(t.target), t.target,
                                                 run.data.test, t.attack, eo));
    say("transfer " + t.source + " -> " + t.target + " / " + report.transfers.back().attack + ": accuracy " +
        std::to_string(report.transfers.back().accuracy) + " (" + seconds(t0) + ")");
  }
  emit_report(report, out / "report.json", ReportFormat::Json);
  emit_report(report, out / "report.csv", ReportFormat::Csv);
  return run;
}

}  // namespace targetforge::cli
