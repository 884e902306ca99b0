#include <cmath>
#include <numeric>

#include "attacks_common.hpp"
#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

namespace targetforge {

using namespace detail;

namespace {

void project(Tensor& v, Norm norm, float xi) {
  if (norm == Norm::Linf) {
    for (float& e : v.values()) e = std::min(xi, std::max(-xi, e));
    return;
  }
  double sq = 0.0;
  for (float e : v.values()) sq += static_cast<double>(e) * e;
  double len = std::sqrt(sq);
  if (len > xi) {
    double scale = xi / len;
    for (float& e : v.values()) e = static_cast<float>(e * scale);
  }
}

Tensor shifted(const Tensor& x, const Tensor& v) {
  Tensor out = x;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = clip01(row[j] + v[j]);
  }
  return out;
}

}  // namespace

UapResult uap_fit(const TrainedModel& model, const Tensor& train_x, std::span<const int> train_labels,
                  const Uap& cfg, const AttackOptions& options) {
  validate_attack(cfg);
  check_batch(model, train_x, train_labels);
  const Network& net = model.network();
  Rng rng(mix_seed(options.seed, 0));
  std::vector<std::size_t> pick =
      rng.sample_without_replacement(train_x.dim(0), static_cast<std::size_t>(cfg.train_samples));
  Tensor xs = train_x.gather_rows(pick);
  std::vector<int> ys(pick.size());
  for (std::size_t i = 0; i < pick.size(); ++i) ys[i] = train_labels[pick[i]];

  Shape one{1};
  one.insert(one.end(), xs.shape().begin() + 1, xs.shape().end());
  UapResult result;
  result.perturbation = Tensor(one);
  Tensor& v = result.perturbation;
  const DeepFool inner{cfg.per_sample_max_iter, cfg.overshoot, 10};
  std::vector<std::size_t> order(pick.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int outer = 0; outer < cfg.max_outer_iterations; ++outer) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t j : order) {
      Tensor xi = shifted(xs.slice_rows(j, j + 1), v);
      std::span<const int> label(&ys[j], 1);
      if (row_argmax(net.logits(xi))[0] != ys[j]) continue;
      Tensor adv(xi.shape());
      std::vector<std::uint8_t> conv(1, 0);
      std::vector<int> iters(1, 0);
      deepfool_chunk(net, xi, label, inner, adv, conv, iters);
      if (row_argmax(net.logits(adv))[0] == ys[j]) continue;
      auto base = xs.row(j);
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = adv[k] - base[k];
      project(v, cfg.norm, cfg.xi);
    }
    ++result.outer_iterations;
    float linf = 0.0f;
    double sq = 0.0;
    for (float e : v.values()) {
      linf = std::max(linf, std::fabs(e));
      sq += static_cast<double>(e) * e;
    }
    result.linf_history.push_back(linf);
    result.l2_history.push_back(static_cast<float>(std::sqrt(sq)));
    std::vector<int> pred = row_argmax(predict_probs(model, shifted(xs, v), options.workers));
    std::size_t fooled = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) fooled += pred[i] != ys[i];
    result.fooling_rate = pick.empty() ? 0.0 : static_cast<double>(fooled) / static_cast<double>(pick.size());
    if (result.fooling_rate >= 1.0 - cfg.delta) break;
  }
  return result;
}

}  // namespace targetforge
