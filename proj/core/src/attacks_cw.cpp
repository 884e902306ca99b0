#include <cmath>
#include <limits>
#include <vector>

#include "attacks_common.hpp"

namespace targetforge {

using namespace detail;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kTanhScale = 0.999999;
constexpr double kLargeConst = 1e10;

struct AdamSlot {
  std::vector<float> m, v;
  int t = 0;

  void reset(std::size_t d) {
    m.assign(d, 0.0f);
    v.assign(d, 0.0f);
    t = 0;
  }

  void step(std::span<float> w, std::span<const float> g, double lr) {
    ++t;
    double lr_t = lr * std::sqrt(1.0 - std::pow(kBeta2, t)) / (1.0 - std::pow(kBeta1, t));
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<float>(kBeta1 * m[j] + (1.0 - kBeta1) * g[j]);
      v[j] = static_cast<float>(kBeta2 * v[j] + (1.0 - kBeta2) * static_cast<double>(g[j]) * g[j]);
      w[j] = static_cast<float>(w[j] - lr_t * m[j] / (std::sqrt(static_cast<double>(v[j])) + kAdamEps));
    }
  }
};

float to_tanh_space(float x) { return static_cast<float>(std::atanh((x - 0.5) * 2.0 * kTanhScale)); }
float from_tanh_space(float w) { return static_cast<float>((std::tanh(static_cast<double>(w)) + 1.0) / 2.0); }

struct Margin {
  double real;
  double other;
  int other_index;
  int adjusted_argmax;  // argmax after adding kappa to the true logit
};

Margin margin_of(std::span<const float> z, int label, float kappa) {
  Margin m{z[static_cast<std::size_t>(label)], -std::numeric_limits<double>::infinity(), -1, 0};
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < z.size(); ++j) {
    double v = z[j];
    if (static_cast<int>(j) != label && v > m.other) {
      m.other = v;
      m.other_index = static_cast<int>(j);
    }
    if (static_cast<int>(j) == label) v += kappa;
    if (v > best) {
      best = v;
      m.adjusted_argmax = static_cast<int>(j);
    }
  }
  return m;
}

struct L2Sample {
  std::vector<float> timg, orig, w, best_attack;
  AdamSlot adam;
  double lower = 0.0, upper = kLargeConst, cst = 0.0;
  double best_l2 = kLargeConst, overall_best_l2 = kLargeConst;
  int best_score = -1;
  double prev_loss = 1e6;
  bool active = false;
  int iterations = 0;
};

void cw_l2_chunk(const Network& net, const Tensor& x, std::span<const int> labels, const CarliniWagner& cfg,
                 Tensor& out, std::vector<std::uint8_t>& converged, std::vector<int>& iterations) {
  const std::size_t b = x.dim(0), d = x.row_size();
  std::vector<L2Sample> s(b);
  for (std::size_t i = 0; i < b; ++i) {
    auto xi = x.row(i);
    s[i].timg.resize(d);
    s[i].orig.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      s[i].timg[j] = to_tanh_space(xi[j]);
      s[i].orig[j] = from_tanh_space(s[i].timg[j]);
    }
    s[i].best_attack.assign(xi.begin(), xi.end());
    s[i].cst = cfg.initial_const;
  }
  const int check_every = std::max(1, cfg.max_iterations / 10);
  Shape sample_shape(x.shape().begin() + 1, x.shape().end());

  for (int bs = 0; bs < cfg.binary_search_steps; ++bs) {
    for (auto& si : s) {
      si.w.assign(d, 0.0f);
      si.adam.reset(d);
      si.best_l2 = kLargeConst;
      si.best_score = -1;
      si.prev_loss = 1e6;
      si.active = true;
    }
    for (int it = 0; it < cfg.max_iterations; ++it) {
      std::vector<std::size_t> act;
      for (std::size_t i = 0; i < b; ++i)
        if (s[i].active) act.push_back(i);
      if (act.empty()) break;
      Shape batch_shape{act.size()};
      batch_shape.insert(batch_shape.end(), sample_shape.begin(), sample_shape.end());
      Tensor img(batch_shape);
      for (std::size_t a = 0; a < act.size(); ++a) {
        const L2Sample& si = s[act[a]];
        for (std::size_t j = 0; j < d; ++j) img[a * d + j] = from_tanh_space(si.w[j] + si.timg[j]);
      }
      PassRecord rec = net.forward(img, {Mode::Eval, 0});
      const Tensor& z = rec.logits();
      Tensor dlogits(z.shape());
      std::vector<std::uint8_t> update(act.size(), 1);
      for (std::size_t a = 0; a < act.size(); ++a) {
        L2Sample& si = s[act[a]];
        const int y = labels[act[a]];
        double l2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double diff = img[a * d + j] - si.orig[j];
          l2 += diff * diff;
        }
        Margin mg = margin_of(z.row(a), y, cfg.kappa);
        double loss1 = std::max(0.0, mg.real - mg.other + cfg.kappa);
        double loss = si.cst * loss1 + l2;
        if (cfg.abort_early && it % check_every == 0) {
          if (loss > si.prev_loss * 0.9999) {
            si.active = false;
            update[a] = 0;
            continue;
          }
          si.prev_loss = loss;
        }
        bool success = mg.adjusted_argmax != y;
        if (success && l2 < si.best_l2) {
          si.best_l2 = l2;
          si.best_score = mg.adjusted_argmax;
        }
        if (success && l2 < si.overall_best_l2) {
          si.overall_best_l2 = l2;
          std::copy_n(img.data() + a * d, d, si.best_attack.data());
        }
        if (loss1 > 0.0) {
          dlogits[a * z.dim(1) + static_cast<std::size_t>(y)] = static_cast<float>(si.cst);
          dlogits[a * z.dim(1) + static_cast<std::size_t>(mg.other_index)] = static_cast<float>(-si.cst);
        }
      }
      Tensor dimg = net.backward(rec, dlogits, GradientScope::InputOnly).input;
      std::vector<float> g(d);
      for (std::size_t a = 0; a < act.size(); ++a) {
        if (!update[a]) continue;
        L2Sample& si = s[act[a]];
        for (std::size_t j = 0; j < d; ++j) {
          float nv = img[a * d + j];
          double t = std::tanh(static_cast<double>(si.w[j] + si.timg[j]));
          g[j] = static_cast<float>((dimg[a * d + j] + 2.0 * (nv - si.orig[j])) * (1.0 - t * t) / 2.0);
        }
        si.adam.step(si.w, g, cfg.learning_rate);
        ++si.iterations;
      }
    }
    for (auto& si : s) {
      if (si.best_score != -1) {
        si.upper = std::min(si.upper, si.cst);
        if (si.upper < 1e9) si.cst = (si.lower + si.upper) / 2.0;
      } else {
        si.lower = std::max(si.lower, si.cst);
        si.cst = si.upper < 1e9 ? (si.lower + si.upper) / 2.0 : si.cst * 10.0;
      }
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(s[i].best_attack.begin(), s[i].best_attack.end(), out.row(i).begin());
    converged[i] = s[i].overall_best_l2 < kLargeConst;
    iterations[i] = s[i].iterations;
  }
}

// Iterative-penalty L-infinity variant: shrink tau while the attack keeps succeeding.
struct LinfSample {
  std::vector<float> w, prev;
  AdamSlot adam;
  double tau = 1.0, cst = 0.0;
  int step = 0;
  bool done = false, converged = false;
  int iterations = 0;

  void restart() {
    w.resize(prev.size());
    for (std::size_t j = 0; j < prev.size(); ++j) w[j] = to_tanh_space(prev[j]);
    adam.reset(prev.size());
    step = 0;
  }
};

constexpr double kMinTau = 1.0 / 256.0;
constexpr double kLargestConst = 20.0;
constexpr double kTauDecrease = 0.9;
constexpr double kConstFactor = 2.0;

void cw_linf_chunk(const Network& net, const Tensor& x, std::span<const int> labels, const CarliniWagner& cfg,
                   Tensor& out, std::vector<std::uint8_t>& converged, std::vector<int>& iterations) {
  const std::size_t b = x.dim(0), d = x.row_size();
  std::vector<LinfSample> s(b);
  for (std::size_t i = 0; i < b; ++i) {
    s[i].prev.assign(x.row(i).begin(), x.row(i).end());
    s[i].cst = cfg.initial_const;
    s[i].restart();
  }
  Shape sample_shape(x.shape().begin() + 1, x.shape().end());
  for (;;) {
    std::vector<std::size_t> act;
    for (std::size_t i = 0; i < b; ++i)
      if (!s[i].done) act.push_back(i);
    if (act.empty()) break;
    Shape batch_shape{act.size()};
    batch_shape.insert(batch_shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor img(batch_shape);
    for (std::size_t a = 0; a < act.size(); ++a)
      for (std::size_t j = 0; j < d; ++j) img[a * d + j] = from_tanh_space(s[act[a]].w[j]);
    PassRecord rec = net.forward(img, {Mode::Eval, 0});
    const Tensor& z = rec.logits();
    Tensor dlogits(z.shape());
    std::vector<std::uint8_t> update(act.size(), 0);
    for (std::size_t a = 0; a < act.size(); ++a) {
      LinfSample& si = s[act[a]];
      const int y = labels[act[a]];
      auto xi = x.row(act[a]);
      double loss2 = 0.0, actual_tau = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double diff = std::fabs(static_cast<double>(img[a * d + j]) - xi[j]);
        loss2 += std::max(0.0, diff - si.tau);
        actual_tau = std::max(actual_tau, diff);
      }
      Margin mg = margin_of(z.row(a), y, cfg.kappa);
      double loss1 = std::max(0.0, mg.real - mg.other + cfg.kappa);
      double loss = si.cst * loss1 + loss2;
      bool check = cfg.abort_early || si.step == cfg.max_iterations - 1;
      if (check && loss < 1e-4 * si.cst && mg.adjusted_argmax != y) {
        si.prev.assign(img.data() + a * d, img.data() + (a + 1) * d);
        si.converged = true;
        if (actual_tau < si.tau) si.tau = actual_tau;
        si.tau *= kTauDecrease;
        if (si.tau <= kMinTau) {
          si.done = true;
        } else {
          si.restart();
        }
        continue;
      }
      update[a] = 1;
      if (loss1 > 0.0) {
        dlogits[a * z.dim(1) + static_cast<std::size_t>(y)] = static_cast<float>(si.cst);
        dlogits[a * z.dim(1) + static_cast<std::size_t>(mg.other_index)] = static_cast<float>(-si.cst);
      }
    }
    Tensor dimg = net.backward(rec, dlogits, GradientScope::InputOnly).input;
    std::vector<float> g(d);
    for (std::size_t a = 0; a < act.size(); ++a) {
      if (!update[a]) continue;
      LinfSample& si = s[act[a]];
      auto xi = x.row(act[a]);
      for (std::size_t j = 0; j < d; ++j) {
        double nv = img[a * d + j];
        double diff = nv - xi[j];
        double pen = std::fabs(diff) > si.tau ? (diff > 0 ? 1.0 : -1.0) : 0.0;
        double t = std::tanh(static_cast<double>(si.w[j]));
        g[j] = static_cast<float>((dimg[a * d + j] + pen) * (1.0 - t * t) / 2.0);
      }
      si.adam.step(si.w, g, cfg.learning_rate);
      ++si.iterations;
      if (++si.step >= cfg.max_iterations) {
        si.cst *= kConstFactor;
        if (si.cst >= kLargestConst) {
          si.done = true;
        } else {
          si.restart();
        }
      }
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(s[i].prev.begin(), s[i].prev.end(), out.row(i).begin());
    converged[i] = s[i].converged;
    iterations[i] = s[i].iterations;
  }
}

}  // namespace

AdvBatch carlini_wagner(const TrainedModel& model, const Tensor& x, std::span<const int> labels,
                        const CarliniWagner& cfg, const AttackOptions& options) {
  validate_attack(cfg);
  check_batch(model, x, labels);
  AdvBatch out = start_batch(x, labels);
  for_each_chunk(x.dim(0), options.workers, [&](std::size_t begin, std::size_t end) {
    Tensor xs = x.slice_rows(begin, end);
    Tensor adv(xs.shape());
    std::vector<std::uint8_t> conv(end - begin);
    std::vector<int> iters(end - begin);
    auto ls = labels.subspan(begin, end - begin);
    if (cfg.norm == Norm::L2) {
      cw_l2_chunk(model.network(), xs, ls, cfg, adv, conv, iters);
    } else {
      cw_linf_chunk(model.network(), xs, ls, cfg, adv, conv, iters);
    }
    out.adversarial.set_rows(begin, adv);
    std::copy(conv.begin(), conv.end(), out.converged.begin() + static_cast<long>(begin));
    std::copy(iters.begin(), iters.end(), out.iterations.begin() + static_cast<long>(begin));
  });
  finalize(model, x, out, options.workers);
  return out;
}

}  // namespace targetforge
