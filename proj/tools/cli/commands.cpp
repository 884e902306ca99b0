#include "commands.hpp"

#include <ostream>

#include "targetforge/checkpoint.hpp"
#include "targetforge/container.hpp"
#include "targetforge/digest.hpp"
#include "targetforge/error.hpp"

namespace targetforge::cli {

namespace {

void say(const CommandOptions& o, const std::string& s) {
  if (o.log) *o.log << s << std::endl;
}

void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

TrainedModel load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError({"checkpoint " + path.string() + " does not exist"});
  return load_checkpoint(path);
}

void check_model_fits(const TrainedModel& model, const Dataset& data, const std::filesystem::path& path) {
  if (model.spec().input_shape != data.sample_shape() || model.base_classes() != data.num_classes) {
    throw ConfigError({"checkpoint " + path.string() + " was not built for dataset " + data.name});
  }
}

nlohmann::json eval_provenance(const RunConfig& c, const nlohmann::json& models) {
  return {{"dataset", c.dataset.name},
          {"eval_seed", c.eval.seed},
          {"n_samples", c.eval.n_samples},
          {"checkpoint_sha256", models}};
}

EvalOptions eval_options(const RunConfig& c, const DatasetPair& data, const CommandOptions& o) {
  EvalOptions eo;
  eo.seed = c.eval.seed;
  eo.n_samples = c.eval.n_samples;
  eo.workers = o.workers;
  eo.train = &data.train;
  return eo;
}

void write_reports(const EvalReport& report, const std::filesystem::path& out,
                   const std::optional<std::filesystem::path>& csv) {
  ensure_parent(out);
  emit_report(report, out, ReportFormat::Json);
  if (csv) {
    ensure_parent(*csv);
    emit_report(report, *csv, ReportFormat::Csv);
  }
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->kind()) {
      case ErrorKind::Config:
        return kConfigFailure;
      case ErrorKind::Data:
      case ErrorKind::Format:
        return kDataFailure;
      default:
        return kRuntimeFailure;
    }
  }
  return kRuntimeFailure;
}

std::filesystem::path cmd_train(const std::filesystem::path& config, const std::optional<std::filesystem::path>& out,
                               const CommandOptions& options) {
  RunConfig c = load_run_config(config);
  std::filesystem::path ckpt = out ? *out : std::filesystem::path(c.output_dir) / "model.tfck";
  DatasetPair data = load_datasets(c.dataset);
  c.train.workers = options.workers;

  std::string log;
  TrainCallbacks cb;
  cb.on_epoch = [&](const EpochMetrics& e) {
    log += epoch_to_json(e).dump() + "\n";
    say(options, "epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss) + " clean accuracy " +
                     std::to_string(e.clean_accuracy));
  };
  TrainResult r = train_model(resolve_spec(c), data.train, c.train, cb, &data.test);
  ensure_parent(ckpt);
  save_checkpoint(r.model, ckpt);
  std::filesystem::path log_path = ckpt;
  log_path.replace_extension(".train.jsonl");
  write_file_atomic(log_path, log);
  say(options, "wrote " + ckpt.string());
  return ckpt;
}

void cmd_attack(const std::filesystem::path& config, const std::filesystem::path& checkpoint,
                const std::optional<std::filesystem::path>& attack, const std::filesystem::path& out,
                const CommandOptions& options) {
  RunConfig c = load_run_config(config);
  AttackConfig a;
  if (attack) {
    if (!std::filesystem::exists(*attack)) throw ConfigError({"attack file " + attack->string() + " does not exist"});
    try {
      a = attack_from_json(nlohmann::json::parse(read_file(*attack)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError({attack->string() + ": " + e.what()});
    }
    validate_attack(a);
  } else if (c.attacks.size() == 1) {
    a = c.attacks.front();
  } else {
    throw ConfigError({"attack needs --attack or exactly one entry in the config's attacks list"});
  }
  TrainedModel model = load_model(checkpoint);
  DatasetPair data = load_datasets(c.dataset);
  check_model_fits(model, data.test, checkpoint);

  EvalOptions eo = eval_options(c, data, options);
  AdvBatch adv;
  ReportEntry e = evaluate_attack(model, checkpoint.stem().string(), data.test, a, eo, &adv);
  ensure_parent(out);
  save_adversarial(out, adv,
                   {{"attack", attack_to_json(a)},
                    {"attack_digest", attack_digest(a)},
                    {"checkpoint_sha256", sha256_file(checkpoint)},
                    {"dataset", c.dataset.name},
                    {"eval_seed", c.eval.seed}});
  say(options, "wrote " + std::to_string(adv.size()) + " samples to " + out.string() + ", success rate " +
                   std::to_string(adv.success_rate()) + ", robust accuracy " + std::to_string(e.robust_accuracy));
}

EvalReport cmd_eval(const std::filesystem::path& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& out, const std::optional<std::filesystem::path>& csv,
                    const CommandOptions& options) {
  RunConfig c = load_run_config(config);
  TrainedModel model = load_model(checkpoint);
  DatasetPair data = load_datasets(c.dataset);
  check_model_fits(model, data.test, checkpoint);

  const std::string name = checkpoint.stem().string();
  EvalReport report;
  report.title = "eval";
  report.provenance = eval_provenance(c, {{name, sha256_file(checkpoint)}});
  EvalOptions eo = eval_options(c, data, options);
  std::vector<AttackConfig> attacks = {NoAttack{}};
  attacks.insert(attacks.end(), c.attacks.begin(), c.attacks.end());
  for (const auto& a : attacks) {
    report.entries.push_back(evaluate_attack(model, name, data.test, a, eo));
    say(options, name + " / " + report.entries.back().attack + ": robust accuracy " +
                     std::to_string(report.entries.back().robust_accuracy));
  }
  write_reports(report, out, csv);
  return report;
}

EvalReport cmd_transfer(const std::filesystem::path& config, const std::filesystem::path& source,
                        const std::filesystem::path& target, const std::filesystem::path& out,
                        const std::optional<std::filesystem::path>& csv, const CommandOptions& options) {
  RunConfig c = load_run_config(config);
  if (c.attacks.empty()) throw ConfigError({"transfer needs at least one attack in the config"});
  TrainedModel src = load_model(source);
  TrainedModel dst = load_model(target);
  DatasetPair data = load_datasets(c.dataset);
  check_model_fits(src, data.test, source);
  check_model_fits(dst, data.test, target);

  EvalReport report;
  report.title = "transfer";
  report.provenance = eval_provenance(c, {{"source", sha256_file(source)}, {"target", sha256_file(target)}});
  EvalOptions eo = eval_options(c, data, options);
  for (const auto& a : c.attacks) {
    report.transfers.push_back(
        evaluate_transfer(src, source.stem().string(), dst, target.stem().string(), data.test, a, eo));
    say(options, report.transfers.back().attack + ": transfer accuracy " +
                     std::to_string(report.transfers.back().accuracy));
  }
  write_reports(report, out, csv);
  return report;
}

void cmd_reproduce(const std::string& preset, const std::filesystem::path& out, bool plan_only,
                   const CommandOptions& options) {
  Preset p = make_preset(preset);
  if (plan_only) {
    std::filesystem::create_directories(out);
    write_file_atomic(out / "plan.json", preset_plan(p).dump(2) + "\n");
    say(options, "wrote " + (out / "plan.json").string());
    return;
  }
  run_preset(p, out, {options.workers, options.log});
  say(options, "wrote " + (out / "report.json").string());
}

std::string cmd_defaults() {
  RunConfig c;
  nlohmann::json attacks = nlohmann::json::object();
  for (const AttackConfig& a : {AttackConfig(NoAttack{}), AttackConfig(Fgsm{}), AttackConfig(Bim{}),
                                AttackConfig(Pgd{}), AttackConfig(CarliniWagner{}),
                                AttackConfig(CarliniWagner{Norm::Linf}), AttackConfig(DeepFool{}),
                                AttackConfig(Zoo{}), AttackConfig(Uap{})}) {
    attacks[attack_name(a)] = attack_to_json(a);
  }
  nlohmann::json presets = nlohmann::json::object();
  for (const char* name : {"toy", "mnist", "cifar10"}) presets[name] = preset_plan(make_preset(name));
  nlohmann::json samples = {{"cw", default_sample_count(CarliniWagner{}, 1u << 30)},
                            {"zoo", default_sample_count(Zoo{}, 1u << 30)},
                            {"other", "full test set"}};
  return nlohmann::json{{"run_config", run_config_to_json(c)},
                        {"attacks", attacks},
                        {"eval_sample_counts", samples},
                        {"presets", presets}}
             .dump(2) +
         "\n";
}

void cmd_fetch(const std::string& dataset, const std::optional<std::filesystem::path>& dir,
               const std::string& mirror, const CommandOptions& options) {
  std::filesystem::path target = dir ? *dir : data_root() / dataset;
  for (const auto& f : fetch_dataset(dataset, target, mirror)) {
    say(options, f.name + " " + std::to_string(f.bytes) + " bytes sha256 " + f.sha256);
  }
  say(options, "dataset ready in " + target.string());
}

}  // namespace targetforge::cli
