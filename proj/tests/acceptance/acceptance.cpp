// Acceptance suite: one PASS/FAIL/SKIP line per criterion.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <iostream>
#include <sstream>

#include "commands.hpp"
#include "presets.hpp"
#include "reference.hpp"
#include "targetforge/checkpoint.hpp"
#include "targetforge/container.hpp"
#include "targetforge/error.hpp"
#include "targetforge/parallel.hpp"
#include "targetforge/training.hpp"

using namespace targetforge;
using namespace targetforge::cli;
namespace fs = std::filesystem;

namespace {

enum class Verdict { Pass, Fail, Skip };

struct Outcome {
  Verdict verdict = Verdict::Fail;
  std::string detail;
};

struct Checks {
  bool ok = true;
  std::ostringstream detail;

  void expect(bool condition, const std::string& what) {
    if (!condition) ok = false;
    detail << (detail.tellp() > 0 ? "; " : "") << what << (condition ? "" : " [violated]");
  }
  Outcome outcome() const { return {ok ? Verdict::Pass : Verdict::Fail, detail.str()}; }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelSpec toy_spec(int multiplier, std::size_t width_divisor = 4) {
  ArchitectureOptions o;
  o.input_shape = {8, 8, 1};
  o.base_classes = 4;
  o.width_divisor = width_divisor;
  return build_mnist_spec(multiplier, o);
}

TrainedModel linear_model(std::size_t n, std::size_t k, std::vector<float> w, std::vector<float> b) {
  ModelSpec s;
  s.input_shape = {1, n, 1};
  s.base_classes = k;
  s.layers = {Dense{k}, SoftmaxCrossEntropy{}};
  TrainedModel m(s, 0);
  LayerState& st = m.network().mutable_state(0);
  std::copy(w.begin(), w.end(), st.params[0].values().begin());
  std::copy(b.begin(), b.end(), st.params[1].values().begin());
  return m;
}

void randomize_batchnorm(Network& net, Rng& rng) {
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    if (!std::holds_alternative<BatchNorm>(net.layers()[i])) continue;
    LayerState& s = net.mutable_state(i);
    for (float& v : s.params[0].values()) v = rng.uniform(0.5f, 1.5f);
    for (float& v : s.params[1].values()) v = rng.uniform(-0.5f, 0.5f);
    for (float& v : s.statistics[0].values()) v = rng.uniform(-0.3f, 0.3f);
    for (float& v : s.statistics[1].values()) v = rng.uniform(0.5f, 2.0f);
  }
}

tftest::GradCheck grad_check(const Shape& input, const std::vector<LayerKind>& layers, Mode mode, std::size_t per_tensor,
                             std::size_t input_coords, std::uint64_t seed) {
  Network net(input, layers);
  net.initialize(seed);
  Rng rng(seed);
  randomize_batchnorm(net, rng);
  Shape batch = {4};
  batch.insert(batch.end(), input.begin(), input.end());
  Tensor x(batch);
  for (float& v : x.values()) v = rng.uniform_float();
  tftest::GradCheckOptions o;
  o.mode = mode;
  o.per_tensor = per_tensor;
  o.input_coords = input_coords;
  return tftest::check_gradients(net, x, rng, o);
}

// 1
Outcome gradient_correctness() {
  Checks c;
  for (const std::string& arch : {"mnist", "cifar10"}) {
    ArchitectureOptions o;
    o.input_shape = arch == "mnist" ? Shape{8, 8, 1} : Shape{8, 8, 3};
    o.width_divisor = 8;
    ModelSpec s = arch == "mnist" ? build_mnist_spec(2, o) : build_cifar_spec(2, o);
    tftest::GradCheck r = grad_check(s.input_shape, s.layers, Mode::Train, 20, 60, 31);
    std::size_t parameterized = 0;
    Network net(s.input_shape, s.layers);
    for (const auto& st : net.states()) parameterized += !st.params.empty();
    c.expect(r.passed == r.checked && r.checked >= 100 && r.layers_covered.size() == parameterized,
             arch + " " + std::to_string(r.passed) + "/" + std::to_string(r.checked) + " coords over " +
                 std::to_string(r.layers_covered.size()) + "/" + std::to_string(parameterized) +
                 " parameterized layers, max rel err " + fmt(r.max_rel_error, 6));
  }
  struct Kind {
    const char* name;
    Shape input;
    std::vector<LayerKind> layers;
    Mode mode;
  };
  const Kind kinds[] = {
      {"conv", {6, 5, 3}, {Conv2D{3, 3, 4}}, Mode::Eval},
      {"dense", {3, 3, 2}, {Dense{5}}, Mode::Eval},
      {"batchnorm", {4, 4, 3}, {BatchNorm{}}, Mode::Train},
      {"maxpool", {6, 7, 2}, {MaxPool2x2{}}, Mode::Eval},
      {"dropout", {4, 4, 2}, {Dropout{0.4f}}, Mode::Train},
      {"relu", {4, 4, 2}, {Conv2D{3, 3, 3}, Activation{ActivationFn::ReLU}}, Mode::Eval},
      {"elu", {4, 4, 2}, {Conv2D{3, 3, 3}, Activation{ActivationFn::ELU}}, Mode::Eval},
      {"softmax", {2, 2, 3}, {Dense{3}, SoftmaxCrossEntropy{}}, Mode::Eval},
  };
  std::uint64_t seed = 40;
  for (const auto& k : kinds) {
    tftest::GradCheck r = grad_check(k.input, k.layers, k.mode, 60, 150, seed++);
    c.expect(r.passed == r.checked && r.checked >= 100,
             std::string(k.name) + " " + std::to_string(r.passed) + "/" + std::to_string(r.checked));
  }
  return c.outcome();
}

// 2
Outcome attack_invariants(int workers) {
  Checks c;
  ToyOptions to;
  to.train_size = 400;
  to.test_size = 1000;
  DatasetPair d = make_toy_dataset(13, to);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 32;
  tc.seed = 3;
  TrainedModel m = train_model(toy_spec(1), d.train, tc).model;
  const Tensor& x = d.test.images;
  const auto& y = d.test.labels;
  AttackOptions ao;
  ao.seed = 5;
  ao.workers = workers;

  const float eps = 0.1f;
  const AttackConfig bounded[] = {Fgsm{eps}, Bim{eps, 0.01f, 20}, Pgd{eps, 0.01f, 20, true}};
  for (const auto& a : bounded) {
    AdvBatch adv = run_attack(m, x, y, a, ao);
    double worst = 0.0;
    bool in_box = true;
    for (std::size_t r = 0; r < adv.size(); ++r)
      for (std::size_t i = 0; i < x.row_size(); ++i) {
        float v = adv.adversarial.row(r)[i];
        in_box = in_box && v >= 0.0f && v <= 1.0f;
        worst = std::max(worst, static_cast<double>(std::abs(v - x.row(r)[i])));
      }
    c.expect(adv.size() == 1000 && in_box && worst <= eps + 1e-6,
             attack_name(a) + " max |d| " + fmt(worst, 7) + (in_box ? " in box" : " outside box"));
  }

  for (float kappa : {0.0f, 1.0f}) {
    CarliniWagner cw;
    cw.kappa = kappa;
    cw.max_iterations = 100;
    cw.binary_search_steps = 5;
    cw.initial_const = 1.0f;
    AdvBatch adv = run_attack(m, x, y, cw, ao);
    Tensor z = m.network().logits(adv.adversarial);
    std::size_t k = m.num_outputs(), ok = 0, successes = 0;
    double worst = INFINITY;
    for (std::size_t r = 0; r < adv.size(); ++r) {
      if (!adv.success[r]) continue;
      ++successes;
      float other = -INFINITY;
      for (std::size_t j = 0; j < k; ++j)
        if (static_cast<int>(j) != y[r]) other = std::max(other, z[r * k + j]);
      double margin = other - z[r * k + static_cast<std::size_t>(y[r])];
      worst = std::min(worst, margin);
      ok += margin >= kappa - 1e-4;
    }
    c.expect(successes > 0 && ok == successes, "cw_l2 kappa " + fmt(kappa, 1) + ": " + std::to_string(ok) + "/" +
                                                   std::to_string(successes) + " successes meet margin (min " +
                                                   fmt(worst, 5) + ")");
  }

  const std::size_t n = 64, k = 4, samples = 1000;
  Rng rng(7);
  std::vector<float> w(n * k), b(k);
  for (float& v : w) v = rng.uniform(-1.0f, 1.0f);
  for (float& v : b) v = rng.uniform(-0.2f, 0.2f);
  TrainedModel lin = linear_model(n, k, w, b);
  Tensor lx({samples, 1, n, 1});
  for (float& v : lx.values()) v = rng.uniform(0.4f, 0.6f);
  std::vector<int> ly = row_argmax(lin.network().logits(lx));
  DeepFool df;
  df.candidates = static_cast<int>(k);
  AdvBatch adv = run_attack(lin, lx, ly, df, ao);
  Tensor z = lin.network().logits(lx);
  double worst = 0.0;
  for (std::size_t r = 0; r < samples; ++r) {
    double best = INFINITY;
    auto yr = static_cast<std::size_t>(ly[r]);
    for (std::size_t j = 0; j < k; ++j) {
      if (j == yr) continue;
      double f = z[r * k + j] - z[r * k + yr], norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) norm += std::pow(w[i * k + j] - w[i * k + yr], 2);
      best = std::min(best, std::abs(f) / std::sqrt(norm));
    }
    worst = std::max(worst, std::abs(adv.l2[r] - best) / best);
  }
  c.expect(worst <= 0.05, "deepfool linear max relative gap " + fmt(worst, 5));
  return c.outcome();
}

const ReportEntry* find_entry(const EvalReport& r, const std::string& model, const AttackConfig& attack) {
  for (const auto& e : r.entries)
    if (e.model == model && e.attack_digest == attack_digest(attack)) return &e;
  return nullptr;
}

CarliniWagner cw_l2_100() {
  CarliniWagner cw;
  cw.max_iterations = 100;
  return cw;
}

// 3
Outcome mechanism(const PresetRun& run, double seconds) {
  Checks c;
  const TrainedModel& tt = run.model("target_clean");
  const Dataset& test = run.data.test;
  double clean = clean_accuracy(tt, test);
  c.expect(clean >= 0.95, "(a) clean accuracy " + fmt(clean));

  Tensor probs = predict_probs(tt, test.images);
  auto pred = infer_class(tt, test.images);
  const std::size_t k = tt.base_classes();
  std::size_t correct = 0, paired = 0;
  for (std::size_t r = 0; r < test.size(); ++r) {
    if (pred[r] != test.labels[r]) continue;
    ++correct;
    std::vector<std::size_t> order(tt.num_outputs());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    auto row = probs.row(r);
    std::partial_sort(order.begin(), order.begin() + 2, order.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::size_t lo = std::min(order[0], order[1]), hi = std::max(order[0], order[1]);
    paired += hi == lo + k;
  }
  double pair_rate = correct ? static_cast<double>(paired) / static_cast<double>(correct) : 0.0;
  c.expect(pair_rate >= 0.95, "(b) top-two at i, i+k for " + fmt(pair_rate) + " of correct originals");

  const AttackConfig attacks[] = {DeepFool{}, cw_l2_100()};
  for (const auto& a : attacks) {
    const ReportEntry* t = find_entry(run.report, "target_clean", a);
    const ReportEntry* u = find_entry(run.report, "unsecured", a);
    if (!t || !u) {
      c.expect(false, attack_name(a) + " missing from the toy report");
      continue;
    }
    // all-robust models can have no successful samples at all
    double rate = t->designated_class_rate.value_or(-1.0);
    c.expect(rate >= 0.8, "(c) " + attack_name(a) + " designated rate " +
                              (t->designated_class_rate ? fmt(rate) : std::string("n/a")));
    c.expect(t->robust_accuracy >= 0.9 * t->clean_accuracy,
             "(d) " + attack_name(a) + " target_clean robust " + fmt(t->robust_accuracy) + " vs clean " +
                 fmt(t->clean_accuracy));
    c.expect(u->robust_accuracy < 0.2 * u->clean_accuracy,
             "(d) " + attack_name(a) + " unsecured robust " + fmt(u->robust_accuracy) + " vs clean " +
                 fmt(u->clean_accuracy));
  }
  c.expect(seconds < 600.0, "toy preset " + fmt(seconds, 1) + " s");
  return c.outcome();
}

// 4
Outcome mnist_reproduction(bool extended, int workers, const fs::path& out) {
  if (!extended) return {Verdict::Skip, "extended suite only (pass --extended)"};
  DatasetPair data;
  try {
    data = load_mnist(data_root() / "mnist");
  } catch (const Error& e) {
    return {Verdict::Skip, std::string("MNIST unavailable: ") + e.what()};
  }
  Preset p = make_preset("mnist");
  Checks c;
  auto train = [&](DefenseKind defense) {
    RunConfig rc = preset_model_config(p, {defense_name(defense), defense, NoAttack{}});
    rc.train.workers = workers;
    ModelSpec spec = resolve_spec(rc);
    TrainResult r = train_model(spec, data.train, rc.train, {}, &data.test);
    save_checkpoint(r.model, out / (defense_name(defense) + ".tfck"));
    return r.model;
  };
  TrainedModel unsecured = train(DefenseKind::Unsecured);
  TrainedModel tt = train(DefenseKind::TargetClean);
  double clean = clean_accuracy(unsecured, data.test, workers);
  c.expect(clean >= 0.985, "unsecured clean accuracy " + fmt(clean));
  EvalOptions eo;
  eo.seed = p.base.eval.seed;
  eo.workers = workers;
  CarliniWagner cw;
  cw.max_iterations = 1000;
  eo.n_samples = 1000;
  double tt_cw = evaluate_attack(tt, "target_clean", data.test, cw, eo).robust_accuracy;
  c.expect(tt_cw >= 0.90, "target_clean vs cw_l2 " + fmt(tt_cw));
  eo.n_samples = 0;
  double tt_df = evaluate_attack(tt, "target_clean", data.test, DeepFool{}, eo).robust_accuracy;
  c.expect(tt_df >= 0.90, "target_clean vs deepfool " + fmt(tt_df));
  double un_df = evaluate_attack(unsecured, "unsecured", data.test, DeepFool{}, eo).robust_accuracy;
  c.expect(un_df <= 0.05, "unsecured vs deepfool " + fmt(un_df));
  return c.outcome();
}

// 5
Outcome algorithm_equivalence() {
  Checks c;
  ToyOptions to;
  to.train_size = 256;
  to.test_size = 16;
  DatasetPair d = make_toy_dataset(12, to);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 32;
  tc.seed = 9;
  std::vector<std::vector<float>> clean_traj, adv_traj;
  auto record = [](std::vector<std::vector<float>>& traj) {
    return [&traj](const StepInfo& s) {
      std::vector<float> flat;
      for (const auto& st : s.model.network().states()) {
        for (const auto& t : st.params) flat.insert(flat.end(), t.values().begin(), t.values().end());
        for (const auto& t : st.statistics) flat.insert(flat.end(), t.values().begin(), t.values().end());
      }
      traj.push_back(std::move(flat));
    };
  };
  TrainCallbacks a, b;
  a.on_step = record(clean_traj);
  b.on_step = record(adv_traj);
  target_train_clean(toy_spec(2), d.train, tc, a);
  target_train_adv(toy_spec(2), d.train, tc, b);
  bool same = clean_traj.size() == adv_traj.size() && !clean_traj.empty();
  for (std::size_t i = 0; same && i < clean_traj.size(); ++i)
    same = std::memcmp(clean_traj[i].data(), adv_traj[i].data(), clean_traj[i].size() * sizeof(float)) == 0;
  c.expect(same, std::to_string(clean_traj.size()) + " steps bit-identical between target_train_adv(null) and "
                                                      "target_train_clean");

  std::size_t batches = 0, bad = 0;
  TrainCallbacks guard;
  guard.on_step = [&](const StepInfo& s) {
    ++batches;
    for (int y : s.labels) bad += y < 0 || y >= 4;
  };
  TrainConfig at = tc;
  at.attack = Pgd{0.2f, 0.02f, 5, true};
  adversarial_train(toy_spec(1), d.train, at, guard);
  c.expect(batches > 0 && bad == 0,
           "adversarial_train: " + std::to_string(bad) + " labels >= k over " + std::to_string(batches) + " batches");
  return c.outcome();
}

// 6
Outcome transferability(const PresetRun& run) {
  Checks c;
  const ReportEntry* own = find_entry(run.report, "unsecured", DeepFool{});
  const TransferEntry* tr = nullptr;
  for (const auto& t : run.report.transfers)
    if (t.source_model == "unsecured" && t.target_model == "target_clean" && t.attack == "deepfool") tr = &t;
  if (!own || !tr) return {Verdict::Fail, "deepfool cells missing from the toy report"};
  double gap = tr->accuracy - own->robust_accuracy;
  c.expect(gap >= 0.30, "transfer " + fmt(tr->accuracy) + " vs unsecured own " + fmt(own->robust_accuracy) + " (+" +
                            fmt(100.0 * gap, 1) + " points)");
  return c.outcome();
}

// 7
Outcome cifar_preset() {
  Checks c;
  Preset cifar = make_preset("cifar10");
  Preset mnist = make_preset("mnist");
  nlohmann::json cp = preset_plan(cifar), mp = preset_plan(mnist);
  c.expect(cifar.informational && cp.value("informational", false), "cifar10 preset marked informational");
  bool same_shape = cp.size() == mp.size() && cp["models"].size() == mp["models"].size() &&
                    cp["cells"].size() == mp["cells"].size() && cp["transfers"].size() == mp["transfers"].size();
  for (auto it = mp.begin(); same_shape && it != mp.end(); ++it) same_shape = cp.contains(it.key());
  c.expect(same_shape, "plan shape matches mnist (" + std::to_string(cp["cells"].size()) + " cells, " +
                           std::to_string(cp["transfers"].size()) + " transfers)");
  EvalReport empty;
  empty.title = cifar.name;
  empty.informational = true;
  c.expect(report_to_json(empty).value("informational", false), "report carries the informational flag");
  return c.outcome();
}

// 8
Outcome determinism(const fs::path& out, int workers) {
  Checks c;
  nlohmann::json cfg = {
      {"dataset", {{"name", "toy"}, {"seed", 3}, {"train_size", 256}, {"test_size", 64}}},
      {"model", {{"architecture", "mnist"}, {"width_divisor", 4}}},
      {"train", {{"epochs", 2}, {"batch_size", 32}, {"seed", 8}, {"defense", "target_adv"},
                 {"attack", {{"type", "pgd"}, {"epsilon", 0.1}, {"alpha", 0.02}, {"steps", 5}}}}},
      {"attacks", nlohmann::json::array({{{"type", "deepfool"}}, {{"type", "pgd"}, {"epsilon", 0.1}}})},
      {"eval", {{"seed", 2}}},
      {"output_dir", (out / "determinism").string()}};
  fs::create_directories(out / "determinism");
  fs::path config = out / "determinism" / "config.json";
  write_file_atomic(config, cfg.dump(2));
  fs::path attack = out / "determinism" / "attack.json";
  write_file_atomic(attack, nlohmann::json{{"type", "bim"}, {"epsilon", 0.1}, {"alpha", 0.02}, {"steps", 5}}.dump());
  std::vector<std::string> artifacts[2];
  for (int round = 0; round < 2; ++round) {
    fs::path dir = out / "determinism" / ("run" + std::to_string(round));
    CommandOptions o;
    o.workers = round == 0 ? 1 : workers;
    fs::path ckpt = cmd_train(config, dir / "model.tfck", o);
    cmd_eval(config, ckpt, dir / "report.json", dir / "report.csv", o);
    cmd_attack(config, ckpt, attack, dir / "samples.tfadv", o);
    for (const char* f : {"model.tfck", "model.train.jsonl", "report.json", "report.csv", "samples.tfadv"})
      artifacts[round].push_back(read_file(dir / f));
  }
  c.expect(artifacts[0] == artifacts[1], "checkpoint, training log, reports and samples byte-identical across reruns");
  return c.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"targetforge acceptance suite"};
  fs::path out = fs::temp_directory_path() / "targetforge_acceptance";
  bool extended = false;
  int workers = available_workers();
  app.add_option("--out", out, "Scratch directory");
  app.add_flag("--extended", extended, "Also run the MNIST reproduction");
  std::vector<int> only;
  app.add_option("--workers", workers)->check(CLI::PositiveNumber);
  app.add_option("--criterion", only, "Run only these criteria")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(out);

  int failures = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& f) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) return;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {Verdict::Fail, std::string("threw: ") + e.what()};
    }
    const char* tag = o.verdict == Verdict::Pass ? "PASS" : o.verdict == Verdict::Skip ? "SKIP" : "FAIL";
    failures += o.verdict == Verdict::Fail;
    std::cout << "criterion " << id << " " << tag << " " << title << " (" << fmt(seconds_since(t0), 1)
              << " s): " << o.detail << std::endl;
  };

  if (extended) {
    report(4, "mnist reproduction", [&] { return mnist_reproduction(true, workers, out); });
    return failures == 0 ? 0 : 1;
  }

  report(1, "gradient correctness", [&] {
    auto t0 = std::chrono::steady_clock::now();
    Outcome o = gradient_correctness();
    double s = seconds_since(t0);
    if (s >= 60.0) o = {Verdict::Fail, o.detail + "; runtime " + fmt(s, 1) + " s over 60 s"};
    return o;
  });
  report(2, "attack invariants", [&] {
    auto t0 = std::chrono::steady_clock::now();
    Outcome o = attack_invariants(workers);
    double s = seconds_since(t0);
    if (s >= 300.0) o = {Verdict::Fail, o.detail + "; runtime " + fmt(s, 1) + " s over 300 s"};
    return o;
  });

  std::optional<PresetRun> toy;
  double toy_seconds = 0.0;
  auto toy_run = [&]() -> const PresetRun& {
    if (!toy) {
      auto t0 = std::chrono::steady_clock::now();
      toy = run_preset(make_preset("toy"), out / "toy", {workers, nullptr});
      toy_seconds = seconds_since(t0);
    }
    return *toy;
  };
  report(3, "toy mechanism", [&] {
    const PresetRun& r = toy_run();
    return mechanism(r, toy_seconds);
  });
  report(4, "mnist reproduction", [&] { return mnist_reproduction(false, workers, out); });
  report(5, "algorithm equivalence", [&] { return algorithm_equivalence(); });
  report(6, "transferability", [&] { return transferability(toy_run()); });
  report(7, "cifar10 preset", [&] { return cifar_preset(); });
  report(8, "determinism", [&] { return determinism(out, workers); });

  std::cout << (failures == 0 ? "all criteria met" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
