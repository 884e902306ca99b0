#include <cmath>
#include <limits>

#include "attacks_common.hpp"
#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

namespace targetforge {

using namespace detail;

std::vector<double> zoo_coordinate_gradient(
    const std::function<std::vector<double>(const Tensor& probes)>& batch_loss, const Tensor& point,
    std::span<const std::size_t> coords, double step) {
  if (point.rank() < 1 || point.dim(0) != 1) {
    throw ShapeError(-1, {1}, point.shape(), "gradient estimate expects a single point with leading dim 1");
  }
  const std::size_t d = point.size();
  Shape probe_shape = point.shape();
  probe_shape[0] = 2 * coords.size();
  Tensor probes(probe_shape);
  std::vector<double> spread(coords.size());
  for (std::size_t c = 0; c < coords.size(); ++c) {
    std::size_t j = coords[c];
    std::copy_n(point.data(), d, probes.data() + 2 * c * d);
    std::copy_n(point.data(), d, probes.data() + (2 * c + 1) * d);
    float plus = clip01(static_cast<float>(point[j] + step));
    float minus = clip01(static_cast<float>(point[j] - step));
    probes[2 * c * d + j] = plus;
    probes[(2 * c + 1) * d + j] = minus;
    spread[c] = static_cast<double>(plus) - minus;
  }
  std::vector<double> losses = batch_loss(probes);
  if (losses.size() != probes.dim(0)) {
    throw Error(ErrorKind::State, "loss callback returned the wrong number of values");
  }
  std::vector<double> grad(coords.size(), 0.0);
  for (std::size_t c = 0; c < coords.size(); ++c) {
    if (spread[c] > 0.0) grad[c] = (losses[2 * c] - losses[2 * c + 1]) / spread[c];
  }
  return grad;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kLargeConst = 1e10;

double log_prob(float p) { return std::log(std::max(static_cast<double>(p), 1e-30)); }

struct ZooScore {
  double margin_loss;  // max(log p_y - max_{j != y} log p_j, -kappa)
  bool success;
};

ZooScore score(std::span<const float> probs, int label, float kappa) {
  double real = log_prob(probs[static_cast<std::size_t>(label)]);
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < probs.size(); ++j)
    if (static_cast<int>(j) != label) other = std::max(other, log_prob(probs[j]));
  return {std::max(real - other, -static_cast<double>(kappa)), other > real + kappa};
}

void zoo_sample(const QueryModel& model, const Tensor& x0, int label, const Zoo& cfg, std::uint64_t seed,
                std::span<float> out, std::uint8_t& converged, int& iterations) {
  const std::size_t d = x0.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.coord_batch), d);
  Rng rng(seed);
  double lower = 0.0, upper = kLargeConst, cst = cfg.initial_const;
  double best_l2 = kLargeConst;
  std::copy_n(x0.data(), d, out.data());
  const int check_every = std::max(1, cfg.max_iterations / 10);

  for (int bs = 0; bs < cfg.binary_search_steps; ++bs) {
    Tensor cur = x0;
    std::vector<double> m(d, 0.0), v(d, 0.0);
    std::vector<int> t(d, 0);
    double prev = 1e6;
    bool found = false;
    for (int it = 0; it < cfg.max_iterations; ++it) {
      std::vector<std::size_t> coords = rng.sample_without_replacement(d, batch);
      double base_l2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) base_l2 += std::pow(static_cast<double>(cur[j]) - x0[j], 2);
      auto loss_of = [&](const Tensor& probes) {
        Tensor probs = model.query(probes);
        std::vector<double> losses(probes.dim(0));
        for (std::size_t r = 0; r < probes.dim(0); ++r) {
          std::size_t j = coords[r / 2];
          double l2 = base_l2 - std::pow(static_cast<double>(cur[j]) - x0[j], 2) +
                      std::pow(static_cast<double>(probes[r * d + j]) - x0[j], 2);
          losses[r] = l2 + cst * score(probs.row(r), label, cfg.kappa).margin_loss;
        }
        return losses;
      };
      std::vector<double> g = zoo_coordinate_gradient(loss_of, cur, coords, cfg.step);
      for (std::size_t c = 0; c < coords.size(); ++c) {
        std::size_t j = coords[c];
        ++t[j];
        m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[c];
        v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[c] * g[c];
        double mhat = m[j] / (1.0 - std::pow(kBeta1, t[j]));
        double vhat = v[j] / (1.0 - std::pow(kBeta2, t[j]));
        cur[j] = clip01(static_cast<float>(cur[j] - cfg.learning_rate * mhat / (std::sqrt(vhat) + 1e-8)));
      }
      ++iterations;

      Tensor probs = model.query(cur);
      ZooScore sc = score(probs.row(0), label, cfg.kappa);
      double l2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) l2 += std::pow(static_cast<double>(cur[j]) - x0[j], 2);
      if (sc.success) {
        found = true;
        if (l2 < best_l2) {
          best_l2 = l2;
          std::copy_n(cur.data(), d, out.data());
        }
      }
      double loss = l2 + cst * sc.margin_loss;
      if (cfg.abort_early && it % check_every == 0) {
        if (loss > prev * 0.9999) break;
        prev = loss;
      }
    }
    if (found) {
      upper = std::min(upper, cst);
      if (upper < 1e9) cst = (lower + upper) / 2.0;
    } else {
      lower = std::max(lower, cst);
      cst = upper < 1e9 ? (lower + upper) / 2.0 : cst * 10.0;
    }
  }
  converged = best_l2 < kLargeConst;
}

}  // namespace

AdvBatch zoo(const QueryModel& model, const Tensor& x, std::span<const int> labels, const Zoo& cfg,
             const AttackOptions& options) {
  validate_attack(cfg);
  const Shape& in = model.input_shape();
  if (x.rank() != 4 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1) || labels.size() != x.dim(0)) {
    throw ShapeError(0, in, x.shape(), "attack input does not match model input shape");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.num_outputs()) {
      throw Error(ErrorKind::State, "label " + std::to_string(y) + " outside the model's outputs");
    }
  }
  AdvBatch out = start_batch(x, labels);
  for_each_chunk(x.dim(0), options.workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      zoo_sample(model, x.slice_rows(i, i + 1), labels[i], cfg, mix_seed(options.seed, i), out.adversarial.row(i),
                 out.converged[i], out.iterations[i]);
    }
  });
  for (float& v : out.adversarial.values()) v = clip01(v);
  const std::size_t n = labels.size();
  out.l2.assign(n, 0.0f);
  out.linf.assign(n, 0.0f);
  out.success.assign(n, 0);
  Tensor probs = model.query(out.adversarial);
  std::vector<int> raw = row_argmax(probs);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    float mx = 0.0f;
    for (std::size_t j = 0; j < x.row_size(); ++j) {
      float diff = out.adversarial[i * x.row_size() + j] - x[i * x.row_size() + j];
      sq += static_cast<double>(diff) * diff;
      mx = std::max(mx, std::fabs(diff));
    }
    out.l2[i] = static_cast<float>(std::sqrt(sq));
    out.linf[i] = mx;
    out.success[i] = raw[i] != labels[i];
  }
  return out;
}

}  // namespace targetforge
