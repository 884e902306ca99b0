#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "targetforge/error.hpp"
#include "targetforge/training.hpp"

using namespace targetforge;

namespace {

ModelSpec toy_spec(int multiplier) {
  ArchitectureOptions o;
  o.input_shape = {8, 8, 1};
  o.base_classes = 4;
  o.width_divisor = 4;
  return build_mnist_spec(multiplier, o);
}

DatasetPair toy_data(std::size_t n = 96) {
  ToyOptions o;
  o.train_size = n;
  o.test_size = 32;
  return make_toy_dataset(3, o);
}

TrainConfig quick_config(DefenseKind defense, AttackConfig attack = NoAttack{}) {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 32;
  c.seed = 17;
  c.defense = defense;
  c.attack = attack;
  return c;
}

bool same_parameters(const TrainedModel& a, const TrainedModel& b) {
  const auto& sa = a.network().states();
  const auto& sb = b.network().states();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    for (std::size_t j = 0; j < sa[i].params.size(); ++j)
      if (!bitwise_equal(sa[i].params[j], sb[i].params[j])) return false;
    for (std::size_t j = 0; j < sa[i].statistics.size(); ++j)
      if (!bitwise_equal(sa[i].statistics[j], sb[i].statistics[j])) return false;
  }
  return true;
}

}  // namespace

TEST(TrainingConfig, DefenseNeedsMatchingMultiplier) {
  EXPECT_EQ(required_multiplier(DefenseKind::Unsecured), 1);
  EXPECT_EQ(required_multiplier(DefenseKind::TargetClean), 2);
  EXPECT_EQ(required_multiplier(DefenseKind::TargetAdv), 2);
  EXPECT_EQ(required_multiplier(DefenseKind::AdvTrain), 1);
  EXPECT_EQ(required_multiplier(DefenseKind::TargetCombined), 3);
  EXPECT_THROW(validate_train_config(quick_config(DefenseKind::TargetClean), toy_spec(1)), ConfigError);
  EXPECT_NO_THROW(validate_train_config(quick_config(DefenseKind::TargetClean), toy_spec(2)));
  EXPECT_THROW(validate_train_config(quick_config(DefenseKind::AdvTrain, Uap{}), toy_spec(1)), ConfigError);
  TrainConfig bad = quick_config(DefenseKind::Unsecured, Fgsm{-1.0f});
  bad.epochs = 0;
  bad.batch_size = 0;
  try {
    validate_train_config(bad, toy_spec(2));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_GE(e.problems().size(), 4u);
  }
  EXPECT_THROW(parse_defense("target_magic"), ConfigError);
  for (DefenseKind d : {DefenseKind::Unsecured, DefenseKind::TargetClean, DefenseKind::TargetAdv,
                        DefenseKind::AdvTrain, DefenseKind::TargetCombined})
    EXPECT_EQ(parse_defense(defense_name(d)), d);
}

TEST(TrainingConfig, JsonRoundTripRejectsUnknownFields) {
  TrainConfig c = quick_config(DefenseKind::TargetAdv, Pgd{0.1f, 0.01f, 7, true});
  nlohmann::json j = train_config_to_json(c);
  EXPECT_EQ(train_config_to_json(train_config_from_json(j)), j);
  j["momentum"] = 0.5;
  j["epochs"] = "many";
  try {
    train_config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.problems().size(), 2u);
  }
}

TEST(TrainingBatch, LayoutsPerDefense) {
  DatasetPair d = toy_data(8);
  Tensor x = d.train.images.slice_rows(0, 5);
  std::vector<int> y(d.train.labels.begin(), d.train.labels.begin() + 5);
  struct Expect {
    DefenseKind defense;
    int multiplier;
    std::vector<int> offsets;
  };
  const Expect cases[] = {{DefenseKind::Unsecured, 1, {0}},
                          {DefenseKind::TargetClean, 2, {0, 4}},
                          {DefenseKind::TargetAdv, 2, {0, 4}},
                          {DefenseKind::AdvTrain, 1, {0, 0}},
                          {DefenseKind::TargetCombined, 3, {0, 4, 8}}};
  for (const auto& c : cases) {
    TrainedModel m(toy_spec(c.multiplier), 1);
    TrainingBatch b = build_training_batch(m, quick_config(c.defense, Fgsm{0.2f}), x, y, 5);
    ASSERT_EQ(b.labels.size(), 5 * c.offsets.size()) << defense_name(c.defense);
    ASSERT_EQ(b.images.dim(0), b.labels.size());
    for (std::size_t part = 0; part < c.offsets.size(); ++part)
      for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(b.labels[part * 5 + i], y[i] + c.offsets[part]);
    EXPECT_TRUE(bitwise_equal(b.images.slice_rows(0, 5), x));
    bool attacked = uses_attack(c.defense);
    std::size_t last = c.offsets.size() - 1;
    if (last > 0) EXPECT_EQ(!bitwise_equal(b.images.slice_rows(last * 5, last * 5 + 5), x), attacked);
  }
}

TEST(TrainingBatch, AdversarialTrainingLabelsStayBelowK) {
  DatasetPair d = toy_data(64);
  TrainConfig c = quick_config(DefenseKind::AdvTrain, Pgd{0.2f, 0.05f, 3, true});
  c.epochs = 1;
  bool checked = false;
  TrainCallbacks cb;
  cb.on_step = [&](const StepInfo& s) {
    checked = true;
    for (int y : s.labels) {
      EXPECT_GE(y, 0);
      EXPECT_LT(y, 4);
    }
  };
  adversarial_train(toy_spec(1), d.train, c, cb);
  EXPECT_TRUE(checked);
}

TEST(Training, NullAttackTargetAdvMatchesTargetClean) {
  DatasetPair d = toy_data();
  std::vector<double> clean_losses, adv_losses;
  TrainCallbacks a, b;
  a.on_step = [&](const StepInfo& s) { clean_losses.push_back(s.result.loss); };
  b.on_step = [&](const StepInfo& s) { adv_losses.push_back(s.result.loss); };
  TrainResult clean = target_train_clean(toy_spec(2), d.train, quick_config(DefenseKind::TargetClean), a);
  TrainResult adv = target_train_adv(toy_spec(2), d.train, quick_config(DefenseKind::TargetAdv), b);
  ASSERT_EQ(clean_losses.size(), 6u);
  EXPECT_EQ(clean_losses, adv_losses);
  EXPECT_TRUE(same_parameters(clean.model, adv.model));
}

TEST(Training, DeterministicAndWorkerIndependent) {
  DatasetPair d = toy_data();
  TrainConfig c = quick_config(DefenseKind::TargetAdv, Fgsm{0.1f});
  TrainResult first = train_model(toy_spec(2), d.train, c);
  c.workers = 3;
  TrainResult second = train_model(toy_spec(2), d.train, c);
  EXPECT_TRUE(same_parameters(first.model, second.model));
  ASSERT_EQ(first.history.size(), 2u);
  EXPECT_EQ(first.history[1].loss, second.history[1].loss);
  c.seed = 18;
  EXPECT_FALSE(same_parameters(first.model, train_model(toy_spec(2), d.train, c).model));
  EXPECT_EQ(first.model.provenance()["defense"], "target_adv");
}

TEST(Training, LossDecreasesOnToyData) {
  DatasetPair d = toy_data(256);
  TrainConfig c = quick_config(DefenseKind::Unsecured);
  c.epochs = 3;
  TrainResult r = train_model(toy_spec(1), d.train, c);
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
  EXPECT_GT(r.history.back().clean_accuracy, 0.9);
}

TEST(Training, FirstAdamStepMovesBySignOfGradient) {
  // linear softmax model: dL/dW = x^T (p - onehot) / n, and Adam's first step is lr * sign(g)
  ModelSpec s;
  s.input_shape = {1, 3, 1};
  s.base_classes = 2;
  s.layers = {Dense{2}, SoftmaxCrossEntropy{}};
  TrainedModel m(s, 4);
  std::vector<float> w0(m.network().states()[0].params[0].values().begin(),
                        m.network().states()[0].params[0].values().end());
  Tensor x({2, 1, 3, 1}, std::vector<float>{0.2f, 0.9f, 0.4f, 0.7f, 0.1f, 0.5f});
  std::vector<int> y = {1, 0};
  double g[3][2] = {};
  for (std::size_t r = 0; r < 2; ++r) {
    double z[2];
    for (int j = 0; j < 2; ++j) {
      z[j] = 0.0;
      for (int i = 0; i < 3; ++i) z[j] += x[r * 3 + i] * w0[i * 2 + j];
    }
    double zmax = std::max(z[0], z[1]);
    double e0 = std::exp(z[0] - zmax), e1 = std::exp(z[1] - zmax);
    double p[2] = {e0 / (e0 + e1), e1 / (e0 + e1)};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j) g[i][j] += x[r * 3 + i] * (p[j] - (y[r] == j ? 1.0 : 0.0)) / 2.0;
  }
  OptimizerState st;
  AdamConfig adam;
  train_step(m, x, y, st, adam, 0);
  auto w1 = m.network().states()[0].params[0].values();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      ASSERT_GT(std::abs(g[i][j]), 1e-3);
      double expected = w0[i * 2 + j] - adam.learning_rate * (g[i][j] > 0 ? 1.0 : -1.0);
      EXPECT_NEAR(w1[i * 2 + j], expected, 1e-6);
    }
  }
  EXPECT_EQ(st.step, 1u);
}

TEST(Training, NonFiniteLossIsNumericError) {
  TrainedModel m(toy_spec(1), 2);
  m.network().mutable_state(0).params[0][0] = std::numeric_limits<float>::quiet_NaN();
  DatasetPair d = toy_data(8);
  OptimizerState st;
  try {
    train_step(m, d.train.images, d.train.labels, st, AdamConfig{}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

TEST(Training, RejectsMismatchedDataset) {
  DatasetPair d = toy_data(8);
  ArchitectureOptions o;
  o.input_shape = {8, 8, 1};
  o.base_classes = 10;
  o.width_divisor = 4;
  EXPECT_THROW(train_model(build_mnist_spec(1, o), d.train, quick_config(DefenseKind::Unsecured)), ConfigError);
}
