#include <cmath>
#include <numeric>
#include <vector>

#include "attacks_common.hpp"
#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

namespace targetforge {

namespace detail {

void check_batch(const TrainedModel& model, const Tensor& x, std::span<const int> labels) {
  const Shape& in = model.spec().input_shape;
  if (x.rank() != 4 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1)) {
    Shape expected{x.rank() ? x.dim(0) : 0};
    expected.insert(expected.end(), in.begin(), in.end());
    throw ShapeError(0, expected, x.shape(), "attack input does not match model input shape");
  }
  if (labels.size() != x.dim(0)) {
    throw ShapeError(-1, {x.dim(0)}, {labels.size()}, "label count does not match batch size");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= model.base_classes()) {
      throw Error(ErrorKind::State, "ground-truth label " + std::to_string(labels[i]) + " at position " +
                                        std::to_string(i) + " outside [0, " + std::to_string(model.base_classes()) +
                                        ")");
    }
  }
}

Tensor cross_entropy_logit_gradient(const Tensor& logits, std::span<const int> labels) {
  Tensor grad(logits.shape());
  const std::size_t c = logits.dim(1);
  std::vector<double> p(c);
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    auto z = logits.row(i);
    double peak = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += (p[j] = std::exp(static_cast<double>(z[j]) - peak));
    for (std::size_t j = 0; j < c; ++j) p[j] /= sum;
    p[static_cast<std::size_t>(labels[i])] -= 1.0;
    for (std::size_t j = 0; j < c; ++j) grad[i * c + j] = static_cast<float>(p[j]);
  }
  return grad;
}

Tensor cross_entropy_input_gradient(const Network& net, const Tensor& x, std::span<const int> labels) {
  PassRecord rec = net.forward(x, {Mode::Eval, 0});
  return net.backward(rec, cross_entropy_logit_gradient(rec.logits(), labels), GradientScope::InputOnly).input;
}

AdvBatch start_batch(const Tensor& x, std::span<const int> labels) {
  AdvBatch out;
  out.adversarial = x;
  out.source_indices.resize(labels.size());
  std::iota(out.source_indices.begin(), out.source_indices.end(), std::size_t{0});
  out.labels.assign(labels.begin(), labels.end());
  out.converged.assign(labels.size(), 0);
  out.iterations.assign(labels.size(), 0);
  return out;
}

void finalize(const TrainedModel& model, const Tensor& x, AdvBatch& out, int workers) {
  for (float& v : out.adversarial.values()) v = clip01(v);
  const std::size_t n = out.labels.size();
  out.l2.assign(n, 0.0f);
  out.linf.assign(n, 0.0f);
  out.success.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto a = out.adversarial.row(i);
    auto b = x.row(i);
    double sq = 0.0;
    float mx = 0.0f;
    for (std::size_t j = 0; j < a.size(); ++j) {
      float d = a[j] - b[j];
      sq += static_cast<double>(d) * d;
      mx = std::max(mx, std::fabs(d));
    }
    out.l2[i] = static_cast<float>(std::sqrt(sq));
    out.linf[i] = mx;
  }
  std::vector<int> raw = row_argmax(predict_probs(model, out.adversarial, workers));
  for (std::size_t i = 0; i < n; ++i) out.success[i] = raw[i] != out.labels[i];
}

}  // namespace detail

using namespace detail;

namespace {

float sign(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

// Shared BIM/PGD loop over one chunk starting from `iterate`.
void iterate_sign_steps(const Network& net, const Tensor& x, std::span<const int> labels, Tensor& iterate,
                        float epsilon, float alpha, int steps, std::size_t begin, const IterateObserver& observer) {
  for (int step = 1; step <= steps; ++step) {
    Tensor g = cross_entropy_input_gradient(net, iterate, labels);
    for (std::size_t k = 0; k < iterate.size(); ++k) {
      float v = iterate[k] + alpha * sign(g[k]);
      v = std::min(std::max(v, x[k] - epsilon), x[k] + epsilon);
      iterate[k] = clip01(v);
    }
    if (observer) observer(begin, step, iterate);
  }
}

}  // namespace

AdvBatch fgsm(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const Fgsm& cfg,
              const AttackOptions& options) {
  validate_attack(cfg);
  check_batch(model, x, labels);
  AdvBatch out = start_batch(x, labels);
  for_each_chunk(x.dim(0), options.workers, [&](std::size_t begin, std::size_t end) {
    Tensor xs = x.slice_rows(begin, end);
    Tensor g = cross_entropy_input_gradient(model.network(), xs, labels.subspan(begin, end - begin));
    for (std::size_t k = 0; k < xs.size(); ++k) xs[k] = clip01(xs[k] + cfg.epsilon * sign(g[k]));
    out.adversarial.set_rows(begin, xs);
  });
  finalize(model, x, out, options.workers);
  std::fill(out.iterations.begin(), out.iterations.end(), 1);
  out.converged = out.success;
  return out;
}

AdvBatch bim(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const Bim& cfg,
             const AttackOptions& options) {
  validate_attack(cfg);
  check_batch(model, x, labels);
  AdvBatch out = start_batch(x, labels);
  for_each_chunk(x.dim(0), options.workers, [&](std::size_t begin, std::size_t end) {
    Tensor xs = x.slice_rows(begin, end);
    Tensor iterate = xs;
    iterate_sign_steps(model.network(), xs, labels.subspan(begin, end - begin), iterate, cfg.epsilon, cfg.alpha,
                       cfg.steps, begin, options.on_iterate);
    out.adversarial.set_rows(begin, iterate);
  });
  finalize(model, x, out, options.workers);
  std::fill(out.iterations.begin(), out.iterations.end(), cfg.steps);
  out.converged = out.success;
  return out;
}

AdvBatch pgd(const TrainedModel& model, const Tensor& x, std::span<const int> labels, const Pgd& cfg,
             const AttackOptions& options) {
  validate_attack(cfg);
  check_batch(model, x, labels);
  AdvBatch out = start_batch(x, labels);
  for_each_chunk(x.dim(0), options.workers, [&](std::size_t begin, std::size_t end) {
    Tensor xs = x.slice_rows(begin, end);
    Tensor iterate = xs;
    if (cfg.random_start) {
      const std::size_t d = xs.row_size();
      for (std::size_t i = 0; i < end - begin; ++i) {
        Rng rng(mix_seed(options.seed, begin + i));
        for (std::size_t j = 0; j < d; ++j) {
          std::size_t k = i * d + j;
          float lo = std::max(0.0f, xs[k] - cfg.epsilon);
          float hi = std::min(1.0f, xs[k] + cfg.epsilon);
          iterate[k] = std::min(hi, lo + (hi - lo) * rng.uniform_float());
        }
      }
    }
    iterate_sign_steps(model.network(), xs, labels.subspan(begin, end - begin), iterate, cfg.epsilon, cfg.alpha,
                       cfg.steps, begin, options.on_iterate);
    out.adversarial.set_rows(begin, iterate);
  });
  finalize(model, x, out, options.workers);
  std::fill(out.iterations.begin(), out.iterations.end(), cfg.steps);
  out.converged = out.success;
  return out;
}

AdvBatch apply_perturbation(const TrainedModel& model, const Tensor& x, std::span<const int> labels,
                            const Tensor& perturbation, int workers) {
  check_batch(model, x, labels);
  AdvBatch out = start_batch(x, labels);
  if (!perturbation.empty()) {
    if (perturbation.size() != x.row_size()) {
      throw ShapeError(-1, x.shape(), perturbation.shape(), "perturbation does not match sample shape");
    }
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      auto row = out.adversarial.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = clip01(row[j] + perturbation[j]);
    }
  }
  finalize(model, x, out, workers);
  out.converged = out.success;
  return out;
}

}  // namespace targetforge
