#include <cmath>
#include <limits>
#include <numeric>

#include "attacks_common.hpp"

namespace targetforge {

namespace detail {

namespace {

// Candidate classes by descending logit; equal logits keep index order.
std::vector<int> top_candidates(std::span<const float> z, std::size_t count) {
  std::vector<int> order(z.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return z[static_cast<std::size_t>(a)] > z[static_cast<std::size_t>(b)]; });
  order.resize(count);
  return order;
}

int argmax_of(std::span<const float> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

}  // namespace

void deepfool_chunk(const Network& net, const Tensor& x, std::span<const int> labels, const DeepFool& cfg,
                    Tensor& out, std::vector<std::uint8_t>& converged, std::vector<int>& iterations) {
  const std::size_t b = x.dim(0), d = x.row_size();
  const std::size_t outputs = net.output_size();
  const std::size_t nc = std::min<std::size_t>(static_cast<std::size_t>(cfg.candidates), outputs);
  std::vector<double> r_tot(b * d, 0.0);
  std::vector<std::uint8_t> active(b, 1);
  std::fill(iterations.begin(), iterations.end(), 0);
  Shape sample_shape(x.shape().begin() + 1, x.shape().end());

  for (int iter = 0;; ++iter) {
    std::vector<std::size_t> act;
    for (std::size_t i = 0; i < b; ++i)
      if (active[i]) act.push_back(i);
    if (act.empty()) break;
    Shape batch_shape{act.size()};
    batch_shape.insert(batch_shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor cur(batch_shape);
    for (std::size_t a = 0; a < act.size(); ++a)
      for (std::size_t j = 0; j < d; ++j)
        cur[a * d + j] = clip01(static_cast<float>(x[act[a] * d + j] + r_tot[act[a] * d + j]));
    PassRecord rec = net.forward(cur, {Mode::Eval, 0});
    const Tensor& z = rec.logits();

    std::vector<std::vector<int>> cand(act.size());
    bool any = false;
    for (std::size_t a = 0; a < act.size(); ++a) {
      std::size_t i = act[a];
      if (argmax_of(z.row(a)) != labels[i]) {
        active[i] = 0;
        converged[i] = 1;
        continue;
      }
      if (iter >= cfg.max_iterations) {
        active[i] = 0;
        continue;
      }
      cand[a] = top_candidates(z.row(a), nc);
      any = true;
    }
    if (!any) break;

    std::vector<double> best_pert(act.size(), std::numeric_limits<double>::infinity());
    std::vector<std::vector<float>> best_w(act.size());
    for (std::size_t k = 1; k < nc; ++k) {
      Tensor dlogits(z.shape());
      for (std::size_t a = 0; a < act.size(); ++a) {
        if (!active[act[a]]) continue;
        dlogits[a * outputs + static_cast<std::size_t>(cand[a][k])] += 1.0f;
        dlogits[a * outputs + static_cast<std::size_t>(cand[a][0])] -= 1.0f;
      }
      Tensor w = net.backward(rec, dlogits, GradientScope::InputOnly).input;
      for (std::size_t a = 0; a < act.size(); ++a) {
        if (!active[act[a]]) continue;
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += static_cast<double>(w[a * d + j]) * w[a * d + j];
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        double f = static_cast<double>(z[a * outputs + static_cast<std::size_t>(cand[a][k])]) -
                   z[a * outputs + static_cast<std::size_t>(cand[a][0])];
        double pert = (std::fabs(f) + 1e-5) / norm;
        if (pert < best_pert[a]) {
          best_pert[a] = pert;
          best_w[a].assign(w.data() + a * d, w.data() + (a + 1) * d);
        }
      }
    }
    for (std::size_t a = 0; a < act.size(); ++a) {
      std::size_t i = act[a];
      if (!active[i]) continue;
      if (best_w[a].empty()) {
        active[i] = 0;  // flat logits, no direction to follow
        continue;
      }
      double norm = 0.0;
      for (float v : best_w[a]) norm += static_cast<double>(v) * v;
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < d; ++j) r_tot[i * d + j] += best_pert[a] * best_w[a][j] / norm;
      ++iterations[i];
    }
  }
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = clip01(static_cast<float>(x[i * d + j] + (1.0 + cfg.overshoot) * r_tot[i * d + j]));
}

}  // namespace detail

using namespace detail;

AdvBatch deepfool(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const DeepFool& cfg,
                  const AttackOptions& options) {
  validate_attack(cfg);
  check_batch(model, x, labels);
  AdvBatch out = start_batch(x, labels);
  for_each_chunk(x.dim(0), options.workers, [&](std::size_t begin, std::size_t end) {
    Tensor xs = x.slice_rows(begin, end);
    Tensor adv(xs.shape());
    std::vector<std::uint8_t> conv(end - begin, 0);
    std::vector<int> iters(end - begin, 0);
    deepfool_chunk(model.network(), xs, labels.subspan(begin, end - begin), cfg, adv, conv, iters);
    out.adversarial.set_rows(begin, adv);
    std::copy(conv.begin(), conv.end(), out.converged.begin() + static_cast<long>(begin));
    std::copy(iters.begin(), iters.end(), out.iterations.begin() + static_cast<long>(begin));
  });
  finalize(model, x, out, options.workers);
  return out;
}

}  // namespace targetforge
