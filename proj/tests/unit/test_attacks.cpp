#include <gtest/gtest.h>

#include <cmath>
#include <mutex>

#include "targetforge/attacks.hpp"
#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

using namespace targetforge;

namespace {

TrainedModel linear_model(Shape input, std::size_t k, const std::vector<float>& w, const std::vector<float>& b) {
  ModelSpec s;
  s.input_shape = std::move(input);
  s.base_classes = k;
  s.layers = {Dense{k}, SoftmaxCrossEntropy{}};
  TrainedModel m(s, 0);
  LayerState& st = m.network().mutable_state(0);
  std::copy(w.begin(), w.end(), st.params[0].values().begin());
  std::copy(b.begin(), b.end(), st.params[1].values().begin());
  return m;
}

TrainedModel conv_model(int multiplier, std::uint64_t seed) {
  ArchitectureOptions o;
  o.input_shape = {8, 8, 1};
  o.base_classes = 4;
  o.width_divisor = 4;
  return TrainedModel(build_mnist_spec(multiplier, o), seed);
}

Tensor uniform_batch(Shape shape, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  return y;
}

float linf_distance(const Tensor& a, const Tensor& b, std::size_t row) {
  float m = 0.0f;
  for (std::size_t i = 0; i < a.row_size(); ++i) m = std::max(m, std::abs(a.row(row)[i] - b.row(row)[i]));
  return m;
}

void expect_in_box(const Tensor& t) {
  for (float v : t.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

}  // namespace

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  TrainedModel m = conv_model(1, 1);
  Rng rng(1);
  Tensor x = uniform_batch({10, 8, 8, 1}, rng);
  AdvBatch a = fgsm(m, x, random_labels(10, 4, rng), Fgsm{0.0f});
  EXPECT_TRUE(bitwise_equal(a.adversarial, x));
  for (float v : a.linf) EXPECT_EQ(v, 0.0f);
}

TEST(Fgsm, SinglePixelLogisticStep) {
  // logits (x, -x): increasing x favours class 0, so a class-0 label pushes x down
  TrainedModel m = linear_model({1, 1, 1}, 2, {1.0f, -1.0f}, {0.0f, 0.0f});
  Tensor x({2, 1, 1, 1}, std::vector<float>{0.5f, 0.5f});
  std::vector<int> y = {0, 1};
  AdvBatch a = fgsm(m, x, y, Fgsm{0.1f});
  EXPECT_FLOAT_EQ(a.adversarial[0], 0.4f);
  EXPECT_FLOAT_EQ(a.adversarial[1], 0.6f);
  Tensor edge({1, 1, 1, 1}, std::vector<float>{0.05f});
  std::vector<int> y0 = {0};
  EXPECT_EQ(fgsm(m, edge, y0, Fgsm{0.1f}).adversarial[0], 0.0f);
}

TEST(Fgsm, BudgetIsTightWhereNotClipped) {
  TrainedModel m = conv_model(2, 2);
  Rng rng(2);
  Tensor x = uniform_batch({6, 8, 8, 1}, rng, 0.3f, 0.7f);
  AdvBatch a = fgsm(m, x, random_labels(6, 4, rng), Fgsm{0.2f});
  for (std::size_t i = 0; i < x.size(); ++i) {
    float d = std::abs(a.adversarial[i] - x[i]);
    EXPECT_TRUE(d == 0.0f || std::abs(d - 0.2f) < 1e-6f) << d;
  }
}

TEST(Bim, OneFullStepEqualsFgsm) {
  TrainedModel m = conv_model(1, 3);
  Rng rng(3);
  Tensor x = uniform_batch({7, 8, 8, 1}, rng);
  auto y = random_labels(7, 4, rng);
  AdvBatch a = bim(m, x, y, Bim{0.1f, 0.1f, 1});
  AdvBatch b = fgsm(m, x, y, Fgsm{0.1f});
  EXPECT_TRUE(bitwise_equal(a.adversarial, b.adversarial));
}

TEST(Bim, LossNonDecreasingOnLinearModel) {
  Rng rng(4);
  std::vector<float> w(8), b = {0.1f, -0.1f};
  for (float& v : w) v = rng.uniform(-1, 1);
  TrainedModel m = linear_model({2, 2, 1}, 2, w, b);
  Tensor x = uniform_batch({5, 2, 2, 1}, rng, 0.2f, 0.8f);
  auto y = random_labels(5, 2, rng);
  std::vector<double> losses;
  AttackOptions o;
  o.on_iterate = [&](std::size_t, int, const Tensor& it) {
    losses.push_back(loss_forward(m.network().logits(it), y));
  };
  AdvBatch a = bim(m, x, y, Bim{0.3f, 0.02f, 15}, o);
  ASSERT_EQ(losses.size(), 15u);
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_GE(losses[i], losses[i - 1] - 1e-7);
  for (std::size_t r = 0; r < 5; ++r) EXPECT_LE(linf_distance(a.adversarial, x, r), 0.3f + 1e-6f);
}

TEST(Pgd, ZeroEpsilonIsIdentity) {
  TrainedModel m = conv_model(1, 5);
  Rng rng(5);
  Tensor x = uniform_batch({4, 8, 8, 1}, rng);
  AdvBatch a = pgd(m, x, random_labels(4, 4, rng), Pgd{0.0f, 0.01f, 5, true});
  EXPECT_TRUE(bitwise_equal(a.adversarial, x));
}

TEST(Pgd, EveryIterateStaysInBallAndBox) {
  TrainedModel m = conv_model(2, 6);
  Rng rng(6);
  Tensor x = uniform_batch({70, 8, 8, 1}, rng);
  auto y = random_labels(70, 4, rng);
  std::mutex mu;
  int seen = 0;
  float worst = 0.0f;
  AttackOptions o;
  o.seed = 3;
  o.on_iterate = [&](std::size_t begin, int, const Tensor& it) {
    std::lock_guard lock(mu);
    ++seen;
    for (std::size_t r = 0; r < it.dim(0); ++r) {
      for (std::size_t i = 0; i < it.row_size(); ++i) {
        float v = it.row(r)[i];
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
        worst = std::max(worst, std::abs(v - x.row(begin + r)[i]));
      }
    }
  };
  pgd(m, x, y, Pgd{0.3f, 0.01f, 40, true}, o);
  EXPECT_EQ(seen, 40 * 2);  // two chunks of samples
  EXPECT_LE(worst, 0.3f + 1e-6f);
}

TEST(Pgd, SeededAndWorkerIndependent) {
  TrainedModel m = conv_model(1, 7);
  Rng rng(7);
  Tensor x = uniform_batch({150, 8, 8, 1}, rng);
  auto y = random_labels(150, 4, rng);
  AttackOptions serial, parallel;
  serial.seed = parallel.seed = 9;
  parallel.workers = 3;
  AdvBatch a = pgd(m, x, y, Pgd{0.1f, 0.01f, 5, true}, serial);
  AdvBatch b = pgd(m, x, y, Pgd{0.1f, 0.01f, 5, true}, parallel);
  EXPECT_TRUE(bitwise_equal(a.adversarial, b.adversarial));
  AttackOptions other = serial;
  other.seed = 10;
  EXPECT_FALSE(bitwise_equal(a.adversarial, pgd(m, x, y, Pgd{0.1f, 0.01f, 5, true}, other).adversarial));
}

TEST(CarliniWagner, SuccessfulSamplesMeetMargin) {
  TrainedModel m = conv_model(2, 8);
  Rng rng(8);
  Tensor x = uniform_batch({12, 8, 8, 1}, rng);
  auto y = random_labels(12, 4, rng);
  for (float kappa : {0.0f, 0.5f}) {
    CarliniWagner cfg;
    cfg.kappa = kappa;
    cfg.max_iterations = 200;
    cfg.binary_search_steps = 4;
    cfg.initial_const = 1.0f;
    AdvBatch a = carlini_wagner(m, x, y, cfg);
    expect_in_box(a.adversarial);
    Tensor z = m.network().logits(a.adversarial);
    std::size_t k = m.num_outputs(), successes = 0;
    for (std::size_t r = 0; r < 12; ++r) {
      if (!a.success[r]) {
        EXPECT_TRUE(bitwise_equal(a.adversarial.slice_rows(r, r + 1), x.slice_rows(r, r + 1)));
        continue;
      }
      ++successes;
      float other = -INFINITY;
      for (std::size_t j = 0; j < k; ++j) {
        if (static_cast<int>(j) != y[r]) other = std::max(other, z[r * k + j]);
      }
      EXPECT_GE(other - z[r * k + static_cast<std::size_t>(y[r])], kappa - 1e-4f);
    }
    EXPECT_GT(successes, 6u);
  }
}

TEST(CarliniWagner, L2ApproachesHyperplaneDistance) {
  // binary classifier on 2 pixels: Z0 - Z1 = d.x + c
  const float d0 = 1.5f, d1 = -0.8f, c = -0.2f;
  TrainedModel m = linear_model({1, 2, 1}, 2, {d0, 0.0f, d1, 0.0f}, {c, 0.0f});
  Tensor x({3, 1, 2, 1}, std::vector<float>{0.6f, 0.4f, 0.55f, 0.5f, 0.7f, 0.45f});
  std::vector<int> y = {0, 0, 0};
  CarliniWagner cfg;
  cfg.max_iterations = 1000;
  cfg.learning_rate = 5e-3f;
  AdvBatch a = carlini_wagner(m, x, y, cfg);
  for (std::size_t r = 0; r < 3; ++r) {
    double margin = d0 * x[r * 2] + d1 * x[r * 2 + 1] + c;
    ASSERT_GT(margin, 0.0);
    double exact = margin / std::hypot(d0, d1);
    ASSERT_TRUE(a.success[r]);
    EXPECT_NEAR(a.l2[r], exact, 0.05 * exact) << r;
  }
}

TEST(CarliniWagner, LinfRespectsMarginAndBox) {
  TrainedModel m = conv_model(1, 9);
  Rng rng(9);
  Tensor x = uniform_batch({6, 8, 8, 1}, rng);
  auto y = random_labels(6, 4, rng);
  CarliniWagner cfg;
  cfg.norm = Norm::Linf;
  cfg.max_iterations = 20;
  AdvBatch a = carlini_wagner(m, x, y, cfg);
  expect_in_box(a.adversarial);
  auto pred = row_argmax(predict_probs(m, a.adversarial));
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_EQ(a.success[r] != 0, pred[r] != y[r]);
    EXPECT_NEAR(a.linf[r], linf_distance(a.adversarial, x, r), 1e-6);
  }
}

TEST(DeepFool, LinearModelOneStepExactDistance) {
  Rng rng(10);
  const std::size_t k = 4, n = 6;
  std::vector<float> w(n * k), b(k);
  for (float& v : w) v = rng.uniform(-1, 1);
  for (float& v : b) v = rng.uniform(-0.1f, 0.1f);
  TrainedModel m = linear_model({1, n, 1}, k, w, b);
  Tensor x = uniform_batch({20, 1, n, 1}, rng, 0.4f, 0.6f);
  std::vector<int> y = row_argmax(m.network().logits(x));
  DeepFool cfg;
  cfg.candidates = static_cast<int>(k);
  AdvBatch a = deepfool(m, x, y, cfg);
  Tensor z = m.network().logits(x);
  for (std::size_t r = 0; r < 20; ++r) {
    double best = INFINITY;
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == y[r]) continue;
      double f = z[r * k + j] - z[r * k + static_cast<std::size_t>(y[r])], norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double dw = w[i * k + j] - w[i * k + static_cast<std::size_t>(y[r])];
        norm += dw * dw;
      }
      best = std::min(best, std::abs(f) / std::sqrt(norm));
    }
    EXPECT_EQ(a.iterations[r], 1);
    EXPECT_TRUE(a.success[r]);
    EXPECT_NEAR(a.l2[r] / (1.0 + cfg.overshoot), best, 1e-3 * best + 1e-5);
  }
}

TEST(DeepFool, MisclassifiedInputUnchanged) {
  TrainedModel m = linear_model({1, 1, 1}, 2, {1.0f, -1.0f}, {0.0f, 0.0f});
  Tensor x({1, 1, 1, 1}, std::vector<float>{0.8f});
  std::vector<int> y = {1};
  AdvBatch a = deepfool(m, x, y, DeepFool{});
  EXPECT_TRUE(bitwise_equal(a.adversarial, x));
  EXPECT_EQ(a.iterations[0], 0);
}

TEST(Zoo, CoordinateGradientOnQuadratic) {
  Rng rng(11);
  Tensor point({1, 2, 3, 1});
  std::vector<double> a(6), c(6);
  for (std::size_t i = 0; i < 6; ++i) {
    point[i] = rng.uniform(0.2f, 0.8f);
    a[i] = rng.uniform(0.5f, 2.0f);
    c[i] = rng.uniform(0.0f, 1.0f);
  }
  std::size_t probes = 0;
  auto loss = [&](const Tensor& batch) {
    probes += batch.dim(0);
    std::vector<double> out(batch.dim(0));
    for (std::size_t r = 0; r < batch.dim(0); ++r)
      for (std::size_t i = 0; i < 6; ++i) out[r] += a[i] * (batch.row(r)[i] - c[i]) * (batch.row(r)[i] - c[i]);
    return out;
  };
  std::vector<std::size_t> coords = {0, 2, 3, 5};
  auto g = zoo_coordinate_gradient(loss, point, coords, 1e-3);
  EXPECT_EQ(probes, 2 * coords.size());
  for (std::size_t j = 0; j < coords.size(); ++j) {
    std::size_t i = coords[j];
    double exact = 2.0 * a[i] * (static_cast<double>(point[i]) - c[i]);
    EXPECT_NEAR(g[j], exact, 1e-3 * std::max(1.0, std::abs(exact)));
  }
}

TEST(Zoo, OnlyQueriesProbabilities) {
  TrainedModel m = conv_model(1, 12);
  QueryModel q(m);
  Rng rng(12);
  Tensor x = uniform_batch({3, 8, 8, 1}, rng);
  Zoo cfg;
  cfg.max_iterations = 10;
  cfg.coord_batch = 16;
  cfg.abort_early = false;
  AdvBatch a = zoo(q, x, random_labels(3, 4, rng), cfg);
  expect_in_box(a.adversarial);
  EXPECT_GT(q.queries(), 3u * 10u * 32u);
  q.reset_queries();
  EXPECT_EQ(q.queries(), 0u);
}

TEST(Uap, ZeroRadiusKeepsCleanAccuracy) {
  TrainedModel m = conv_model(1, 13);
  Rng rng(13);
  Tensor train = uniform_batch({30, 8, 8, 1}, rng);
  auto ty = random_labels(30, 4, rng);
  Uap cfg;
  cfg.xi = 0.0f;
  cfg.train_samples = 30;
  cfg.max_outer_iterations = 2;
  UapResult r = uap_fit(m, train, ty, cfg);
  for (float v : r.perturbation.values()) EXPECT_EQ(v, 0.0f);
  Tensor x = uniform_batch({10, 8, 8, 1}, rng);
  auto y = random_labels(10, 4, rng);
  AdvBatch a = apply_perturbation(m, x, y, r.perturbation);
  EXPECT_TRUE(bitwise_equal(a.adversarial, x));
}

TEST(Uap, PerturbationStaysInBall) {
  TrainedModel m = conv_model(1, 14);
  Rng rng(14);
  Tensor train = uniform_batch({40, 8, 8, 1}, rng);
  Uap cfg;
  cfg.xi = 0.1f;
  cfg.train_samples = 40;
  cfg.max_outer_iterations = 3;
  cfg.delta = 0.0f;
  UapResult r = uap_fit(m, train, random_labels(40, 4, rng), cfg);
  EXPECT_EQ(r.perturbation.shape(), (Shape{1, 8, 8, 1}));
  ASSERT_FALSE(r.linf_history.empty());
  for (float v : r.linf_history) EXPECT_LE(v, 0.1f + 1e-6f);
  for (float v : r.perturbation.values()) EXPECT_LE(std::abs(v), 0.1f + 1e-6f);
}

TEST(Attacks, BoxInputsUnchangedAndReproducible) {
  TrainedModel m = conv_model(2, 15);
  Rng rng(15);
  Tensor x = uniform_batch({5, 8, 8, 1}, rng);
  Tensor x_copy = x;
  auto y = random_labels(5, 4, rng);
  Tensor train = uniform_batch({20, 8, 8, 1}, rng);
  auto ty = random_labels(20, 4, rng);
  CarliniWagner cw;
  cw.max_iterations = 10;
  cw.binary_search_steps = 2;
  CarliniWagner cwi = cw;
  cwi.norm = Norm::Linf;
  Zoo z;
  z.max_iterations = 5;
  Uap u;
  u.train_samples = 20;
  u.max_outer_iterations = 1;
  const AttackConfig configs[] = {NoAttack{}, Fgsm{}, Bim{0.3f, 0.05f, 3}, Pgd{0.3f, 0.05f, 3, true}, cw, cwi,
                                  DeepFool{5, 0.02f, 4}, z, u};
  std::string before = nlohmann::json(m.network().states()[0].params[0].values()).dump();
  for (const auto& c : configs) {
    AttackOptions o;
    o.seed = 4;
    o.train_images = &train;
    o.train_labels = ty;
    AdvBatch a = run_attack(m, x, y, c, o);
    AdvBatch b = run_attack(m, x, y, c, o);
    expect_in_box(a.adversarial);
    EXPECT_TRUE(bitwise_equal(a.adversarial, b.adversarial)) << attack_name(c);
    EXPECT_EQ(a.size(), 5u);
    EXPECT_TRUE(bitwise_equal(x, x_copy));
    auto pred = row_argmax(predict_probs(m, a.adversarial));
    for (std::size_t r = 0; r < 5; ++r) EXPECT_EQ(a.success[r] != 0, pred[r] != y[r]) << attack_name(c);
  }
  EXPECT_EQ(nlohmann::json(m.network().states()[0].params[0].values()).dump(), before);
}

TEST(AttackConfig, JsonRoundTripDigestAndValidation) {
  CarliniWagner cw;
  cw.norm = Norm::Linf;
  cw.kappa = 40.0f;
  for (const AttackConfig& c : {AttackConfig(Fgsm{0.3f}), AttackConfig(Pgd{}), AttackConfig(cw),
                                AttackConfig(Zoo{}), AttackConfig(Uap{})}) {
    AttackConfig back = attack_from_json(attack_to_json(c));
    EXPECT_EQ(attack_to_json(back), attack_to_json(c));
    EXPECT_EQ(attack_digest(back), attack_digest(c));
    EXPECT_EQ(attack_digest(c).size(), 64u);
  }
  EXPECT_EQ(attack_name(cw), "cw_linf");
  EXPECT_NE(attack_digest(Fgsm{0.3f}), attack_digest(Fgsm{0.1f}));
  EXPECT_THROW(validate_attack(Fgsm{-0.1f}), ConfigError);
  EXPECT_THROW(validate_attack(Bim{0.3f, 0.01f, 0}), ConfigError);
  CarliniWagner neg;
  neg.kappa = -1.0f;
  EXPECT_THROW(validate_attack(neg), ConfigError);
  EXPECT_THROW(attack_from_json({{"type", "fgsm"}, {"epsilon", 0.1}, {"eps", 1}}), ConfigError);
  EXPECT_THROW(attack_from_json({{"type", "boundary"}}), ConfigError);
}

TEST(AttackConfig, LabelsOutOfRangeRejected) {
  TrainedModel m = conv_model(1, 16);
  Tensor x({1, 8, 8, 1}, 0.5f);
  std::vector<int> y = {4};
  EXPECT_THROW(fgsm(m, x, y, Fgsm{}), Error);
}
