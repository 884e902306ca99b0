#include "targetforge/network.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

namespace targetforge {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

std::atomic<std::uint64_t> g_next_version{1};
std::uint64_t fresh_version() { return g_next_version.fetch_add(1, std::memory_order_relaxed); }

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

enum class Op { None, Transpose };

// C(m x n) = op(A) * op(B), optionally accumulated into C.
void gemm(const float* a, Op op_a, const float* b, Op op_b, float* c, Eigen::Index m,
          Eigen::Index n, Eigen::Index k, bool accumulate) {
  MatrixMap out(c, m, n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      out.noalias() += lhs * rhs;
    } else {
      out.noalias() = lhs * rhs;
    }
  };
  if (op_a == Op::None && op_b == Op::None) {
    run(ConstMatrixMap(a, m, k), ConstMatrixMap(b, k, n));
  } else if (op_a == Op::Transpose && op_b == Op::None) {
    run(ConstMatrixMap(a, k, m).transpose(), ConstMatrixMap(b, k, n));
  } else if (op_a == Op::None && op_b == Op::Transpose) {
    run(ConstMatrixMap(a, m, k), ConstMatrixMap(b, n, k).transpose());
  } else {
    run(ConstMatrixMap(a, k, m).transpose(), ConstMatrixMap(b, n, k).transpose());
  }
}

struct ConvGeometry {
  std::size_t height, width, in_channels, out_channels, kernel_h, kernel_w, pad_top, pad_left;
  std::size_t patch() const { return kernel_h * kernel_w * in_channels; }
  std::size_t pixels() const { return height * width; }
};

ConvGeometry conv_geometry(const Conv2D& conv, const Shape& in) {
  return {in[0], in[1], in[2], conv.out_channels, conv.kernel_h, conv.kernel_w,
          (conv.kernel_h - 1) / 2, (conv.kernel_w - 1) / 2};
}

// Samples per im2col chunk, bounding the column buffer to ~32 MB.
std::size_t conv_chunk(const ConvGeometry& g) {
  std::size_t per_sample = g.pixels() * g.patch();
  return std::max<std::size_t>(1, (std::size_t{8} << 20) / std::max<std::size_t>(1, per_sample));
}

void im2col(const float* input, std::size_t samples, const ConvGeometry& g, float* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < samples; ++n) {
    const float* image = input + n * g.pixels() * g.in_channels;
    for (std::size_t oh = 0; oh < g.height; ++oh) {
      for (std::size_t ow = 0; ow < g.width; ++ow) {
        float* dest = cols + ((n * g.height + oh) * g.width + ow) * patch;
        for (std::size_t i = 0; i < g.kernel_h; ++i) {
          long ih = static_cast<long>(oh + i) - static_cast<long>(g.pad_top);
          for (std::size_t j = 0; j < g.kernel_w; ++j) {
            long iw = static_cast<long>(ow + j) - static_cast<long>(g.pad_left);
            float* cell = dest + (i * g.kernel_w + j) * g.in_channels;
            if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.height) || iw >= static_cast<long>(g.width)) {
              std::fill_n(cell, g.in_channels, 0.0f);
            } else {
              std::copy_n(image + (static_cast<std::size_t>(ih) * g.width + static_cast<std::size_t>(iw)) * g.in_channels,
                          g.in_channels, cell);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const float* cols, std::size_t samples, const ConvGeometry& g, float* input_grad) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < samples; ++n) {
    float* image = input_grad + n * g.pixels() * g.in_channels;
    for (std::size_t oh = 0; oh < g.height; ++oh) {
      for (std::size_t ow = 0; ow < g.width; ++ow) {
        const float* src = cols + ((n * g.height + oh) * g.width + ow) * patch;
        for (std::size_t i = 0; i < g.kernel_h; ++i) {
          long ih = static_cast<long>(oh + i) - static_cast<long>(g.pad_top);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t j = 0; j < g.kernel_w; ++j) {
            long iw = static_cast<long>(ow + j) - static_cast<long>(g.pad_left);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            const float* cell = src + (i * g.kernel_w + j) * g.in_channels;
            float* target = image + (static_cast<std::size_t>(ih) * g.width + static_cast<std::size_t>(iw)) * g.in_channels;
            for (std::size_t c = 0; c < g.in_channels; ++c) target[c] += cell[c];
          }
        }
      }
    }
  }
}

Shape batched(std::size_t n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

// ---- forward kernels ------------------------------------------------------

Tensor conv_forward(const Conv2D& conv, const LayerState& state, const Tensor& x, const Shape& in) {
  ConvGeometry g = conv_geometry(conv, in);
  std::size_t n = x.dim(0);
  Tensor y(batched(n, {g.height, g.width, g.out_channels}));
  std::size_t chunk = conv_chunk(g);
  std::vector<float> cols(std::min(chunk, n) * g.pixels() * g.patch());
  const float* kernel = state.params[0].data();
  const float* bias = state.params[1].data();
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    std::size_t count = std::min(chunk, n - begin);
    im2col(x.data() + begin * g.pixels() * g.in_channels, count, g, cols.data());
    float* out = y.data() + begin * g.pixels() * g.out_channels;
    gemm(cols.data(), Op::None, kernel, Op::None, out, static_cast<Eigen::Index>(count * g.pixels()),
         static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.patch()), false);
    for (std::size_t r = 0; r < count * g.pixels(); ++r) {
      float* row = out + r * g.out_channels;
      for (std::size_t c = 0; c < g.out_channels; ++c) row[c] += bias[c];
    }
  }
  return y;
}

Tensor dense_forward(const Dense& dense, const LayerState& state, const Tensor& x) {
  std::size_t n = x.dim(0);
  std::size_t in = x.row_size();
  Tensor y({n, dense.out_dim});
  gemm(x.data(), Op::None, state.params[0].data(), Op::None, y.data(), static_cast<Eigen::Index>(n),
       static_cast<Eigen::Index>(dense.out_dim), static_cast<Eigen::Index>(in), false);
  const float* bias = state.params[1].data();
  for (std::size_t r = 0; r < n; ++r) {
    float* row = y.data() + r * dense.out_dim;
    for (std::size_t c = 0; c < dense.out_dim; ++c) row[c] += bias[c];
  }
  return y;
}

// ---- network ----------------------------------------------------------------

bool feeds_activation(const std::vector<LayerKind>& layers, std::size_t index) {
  for (std::size_t j = index + 1; j < layers.size(); ++j) {
    if (std::holds_alternative<Activation>(layers[j])) return true;
    if (std::holds_alternative<BatchNorm>(layers[j]) || std::holds_alternative<Dropout>(layers[j])) continue;
    return false;
  }
  return false;
}

}  // namespace

Network::Network(Shape input_shape, std::vector<LayerKind> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), version_(fresh_version()) {
  if (input_shape_.size() != 3 || shape_size(input_shape_) == 0) {
    throw ShapeError(0, {0, 0, 0}, input_shape_, "input shape must be (H, W, C) with positive dims");
  }
  Shape current = input_shape_;
  states_.resize(layers_.size());
  layer_shapes_.reserve(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    validate_layer(layers_[i], i);
    LayerState& state = states_[i];
    long index = static_cast<long>(i);
    std::visit(Overloaded{
                   [&](const Conv2D& c) {
                     if (current.size() != 3) throw ShapeError(index, {0, 0, 0}, current, "Conv2D needs (H, W, C) input");
                     state.params = {Tensor({c.kernel_h, c.kernel_w, current[2], c.out_channels}),
                                     Tensor({c.out_channels})};
                     current = {current[0], current[1], c.out_channels};
                   },
                   [&](const Dense& d) {
                     state.params = {Tensor({shape_size(current), d.out_dim}), Tensor({d.out_dim})};
                     current = {d.out_dim};
                   },
                   [&](const BatchNorm&) {
                     std::size_t channels = current.back();
                     state.params = {Tensor({channels}, 1.0f), Tensor({channels})};
                     state.statistics = {Tensor({channels}), Tensor({channels}, 1.0f)};
                   },
                   [&](const MaxPool2x2&) {
                     if (current.size() != 3 || current[0] < 2 || current[1] < 2) {
                       throw ShapeError(index, {2, 2, 0}, current, "MaxPool2x2 needs (H>=2, W>=2, C) input");
                     }
                     current = {current[0] / 2, current[1] / 2, current[2]};
                   },
                   [&](const SoftmaxCrossEntropy&) {
                     if (i + 1 != layers_.size()) {
                       throw ShapeError(index, {}, current, "SoftmaxCrossEntropy must be the final layer");
                     }
                   },
                   [](const auto&) {},
               },
               layers_[i]);
    layer_shapes_.push_back(current);
  }
}

Network::Network(const Network& other)
    : input_shape_(other.input_shape_),
      layers_(other.layers_),
      states_(other.states_),
      layer_shapes_(other.layer_shapes_),
      version_(fresh_version()) {}

Network::Network(Network&& other) noexcept
    : input_shape_(std::move(other.input_shape_)),
      layers_(std::move(other.layers_)),
      states_(std::move(other.states_)),
      layer_shapes_(std::move(other.layer_shapes_)),
      version_(fresh_version()) {
  other.version_ = fresh_version();
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    input_shape_ = other.input_shape_;
    layers_ = other.layers_;
    states_ = other.states_;
    layer_shapes_ = other.layer_shapes_;
    version_ = fresh_version();
  }
  return *this;
}

Network& Network::operator=(Network&& other) noexcept {
  if (this != &other) {
    input_shape_ = std::move(other.input_shape_);
    layers_ = std::move(other.layers_);
    states_ = std::move(other.states_);
    layer_shapes_ = std::move(other.layer_shapes_);
    version_ = fresh_version();
    other.version_ = fresh_version();
  }
  return *this;
}

void Network::initialize(std::uint64_t seed) {
  Shape current = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerState& state = states_[i];
    Rng rng(mix_seed(seed, i));
    auto fill_kernel = [&](Tensor& kernel, double fan_in, double fan_out) {
      double limit = feeds_activation(layers_, i) ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out));
      for (float& w : kernel.values()) w = static_cast<float>((2.0 * rng.uniform_double() - 1.0) * limit);
    };
    std::visit(Overloaded{
                   [&](const Conv2D& c) {
                     double receptive = static_cast<double>(c.kernel_h * c.kernel_w);
                     fill_kernel(state.params[0], receptive * static_cast<double>(current[2]),
                                 receptive * static_cast<double>(c.out_channels));
                     std::fill(state.params[1].values().begin(), state.params[1].values().end(), 0.0f);
                   },
                   [&](const Dense& d) {
                     fill_kernel(state.params[0], static_cast<double>(shape_size(current)), static_cast<double>(d.out_dim));
                     std::fill(state.params[1].values().begin(), state.params[1].values().end(), 0.0f);
                   },
                   [&](const BatchNorm&) {
                     std::size_t channels = current.back();
                     state.params = {Tensor({channels}, 1.0f), Tensor({channels})};
                     state.statistics = {Tensor({channels}), Tensor({channels}, 1.0f)};
                   },
                   [](const auto&) {},
               },
               layers_[i]);
    current = layer_shapes_[i];
  }
  version_ = fresh_version();
}

LayerState& Network::mutable_state(std::size_t layer) {
  version_ = fresh_version();
  return states_.at(layer);
}

std::size_t Network::output_size() const {
  return layer_shapes_.empty() ? shape_size(input_shape_) : shape_size(layer_shapes_.back());
}

PassRecord Network::forward(const Tensor& batch, const ForwardOptions& options) const {
  if (batch.rank() != 4 || !std::equal(input_shape_.begin(), input_shape_.end(), batch.shape().begin() + 1)) {
    throw ShapeError(0, batched(batch.rank() ? batch.dim(0) : 0, input_shape_), batch.shape(),
                     "input batch does not match network input shape");
  }
  const std::size_t n = batch.dim(0);
  PassRecord record;
  record.owner_ = this;
  record.version_ = version_;
  record.mode_ = options.mode;
  record.layers_.resize(layers_.size());
  const bool train = options.mode == Mode::Train;

  Tensor current = batch;
  Shape in_shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerRecord& rec = record.layers_[i];
    const LayerState& state = states_[i];
    Tensor next = std::visit(
        Overloaded{
            [&](const Conv2D& c) {
              rec.input = current;
              return conv_forward(c, state, current, in_shape);
            },
            [&](const Dense& d) {
              rec.input = current;
              return dense_forward(d, state, current);
            },
            [&](const BatchNorm& bn) {
              rec.input = current;
              const std::size_t channels = in_shape.back();
              const std::size_t groups = current.size() / channels;
              const float* gamma = state.params[0].data();
              const float* beta = state.params[1].data();
              Tensor y(current.shape());
              rec.inv_std.assign(channels, 0.0f);
              if (train) {
                std::vector<double> mean(channels, 0.0), var(channels, 0.0);
                for (std::size_t r = 0; r < groups; ++r)
                  for (std::size_t c = 0; c < channels; ++c) mean[c] += current[r * channels + c];
                for (auto& m : mean) m /= static_cast<double>(groups);
                for (std::size_t r = 0; r < groups; ++r)
                  for (std::size_t c = 0; c < channels; ++c) {
                    double d = current[r * channels + c] - mean[c];
                    var[c] += d * d;
                  }
                for (auto& v : var) v /= static_cast<double>(groups);
                rec.batch_mean.resize(channels);
                rec.batch_var.resize(channels);
                for (std::size_t c = 0; c < channels; ++c) {
                  rec.batch_mean[c] = static_cast<float>(mean[c]);
                  rec.batch_var[c] = static_cast<float>(var[c]);
                  rec.inv_std[c] = static_cast<float>(1.0 / std::sqrt(var[c] + bn.epsilon));
                }
              } else {
                const float* rm = state.statistics[0].data();
                const float* rv = state.statistics[1].data();
                rec.batch_mean.assign(rm, rm + channels);
                for (std::size_t c = 0; c < channels; ++c) {
                  rec.inv_std[c] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(rv[c]) + bn.epsilon));
                }
              }
              for (std::size_t r = 0; r < groups; ++r)
                for (std::size_t c = 0; c < channels; ++c) {
                  std::size_t idx = r * channels + c;
                  y[idx] = gamma[c] * ((current[idx] - rec.batch_mean[c]) * rec.inv_std[c]) + beta[c];
                }
              return y;
            },
            [&](const MaxPool2x2&) {
              const std::size_t h = in_shape[0], w = in_shape[1], ch = in_shape[2];
              const std::size_t oh = h / 2, ow = w / 2;
              Tensor y(batched(n, {oh, ow, ch}));
              rec.argmax.resize(y.size());
              for (std::size_t s = 0; s < n; ++s)
                for (std::size_t r = 0; r < oh; ++r)
                  for (std::size_t q = 0; q < ow; ++q)
                    for (std::size_t c = 0; c < ch; ++c) {
                      std::size_t best = ((s * h + 2 * r) * w + 2 * q) * ch + c;
                      for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                          std::size_t idx = ((s * h + 2 * r + di) * w + 2 * q + dj) * ch + c;
                          if (current[idx] > current[best]) best = idx;
                        }
                      std::size_t out = ((s * oh + r) * ow + q) * ch + c;
                      y[out] = current[best];
                      rec.argmax[out] = static_cast<std::uint32_t>(best);
                    }
              return y;
            },
            [&](const Dropout& d) {
              if (!train || d.rate == 0.0f) return current;
              Rng rng(mix_seed(options.dropout_seed, i));
              const float scale = 1.0f / (1.0f - d.rate);
              rec.dropout_mask = Tensor(current.shape());
              Tensor y(current.shape());
              for (std::size_t k = 0; k < current.size(); ++k) {
                float m = rng.uniform_float() >= d.rate ? scale : 0.0f;
                rec.dropout_mask[k] = m;
                y[k] = current[k] * m;
              }
              return y;
            },
            [&](const Activation& a) {
              Tensor y(current.shape());
              if (a.fn == ActivationFn::ReLU) {
                for (std::size_t k = 0; k < current.size(); ++k) y[k] = current[k] > 0.0f ? current[k] : 0.0f;
              } else {
                for (std::size_t k = 0; k < current.size(); ++k)
                  y[k] = current[k] > 0.0f ? current[k] : std::expm1(current[k]);
              }
              rec.output = y;
              return y;
            },
            [&](const SoftmaxCrossEntropy&) { return current; },
        },
        layers_[i]);
    current = std::move(next);
    in_shape = layer_shapes_[i];
  }
  record.logits_ = current.reshaped({n, current.row_size()});
  return record;
}

void Network::check_record(const PassRecord& record) const {
  if (!record.valid()) throw Error(ErrorKind::State, "backward called without a forward pass record");
  if (record.owner_ != this || record.version_ != version_) {
    throw Error(ErrorKind::State, "pass record does not match this network state (parameters changed or foreign record)");
  }
}

Gradients Network::backward(const PassRecord& record, const Tensor& logits_grad, GradientScope scope) const {
  check_record(record);
  const Tensor& logits = record.logits_;
  if (logits_grad.shape() != logits.shape()) {
    throw ShapeError(static_cast<long>(layers_.size()) - 1, logits.shape(), logits_grad.shape(),
                     "logits gradient shape mismatch");
  }
  const bool want_params = scope == GradientScope::ParametersAndInput;
  const bool train = record.mode_ == Mode::Train;
  const std::size_t n = logits.dim(0);

  Gradients grads;
  if (want_params) {
    grads.params.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      for (const Tensor& p : states_[i].params) grads.params[i].emplace_back(p.shape());
    }
  }

  Tensor grad = logits_grad.reshaped(batched(n, layer_shapes_.empty() ? input_shape_ : layer_shapes_.back()));
  for (std::size_t ii = layers_.size(); ii-- > 0;) {
    const LayerRecord& rec = record.layers_[ii];
    const LayerState& state = states_[ii];
    const Shape& in_shape = ii == 0 ? input_shape_ : layer_shapes_[ii - 1];
    const bool need_input_grad = true;
    Tensor next = std::visit(
        Overloaded{
            [&](const Conv2D& c) {
              ConvGeometry g = conv_geometry(c, in_shape);
              Tensor dx(batched(n, in_shape));
              std::size_t chunk = conv_chunk(g);
              std::vector<float> cols(std::min(chunk, n) * g.pixels() * g.patch());
              const float* kernel = state.params[0].data();
              for (std::size_t begin = 0; begin < n; begin += chunk) {
                std::size_t count = std::min(chunk, n - begin);
                const float* dy = grad.data() + begin * g.pixels() * g.out_channels;
                auto rows = static_cast<Eigen::Index>(count * g.pixels());
                if (want_params) {
                  im2col(rec.input.data() + begin * g.pixels() * g.in_channels, count, g, cols.data());
                  gemm(cols.data(), Op::Transpose, dy, Op::None, grads.params[ii][0].data(),
                       static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.out_channels), rows, true);
                  float* db = grads.params[ii][1].data();
                  for (Eigen::Index r = 0; r < rows; ++r)
                    for (std::size_t oc = 0; oc < g.out_channels; ++oc) db[oc] += dy[r * g.out_channels + oc];
                }
                if (need_input_grad) {
                  gemm(dy, Op::None, kernel, Op::Transpose, cols.data(), rows, static_cast<Eigen::Index>(g.patch()),
                       static_cast<Eigen::Index>(g.out_channels), false);
                  col2im_add(cols.data(), count, g, dx.data() + begin * g.pixels() * g.in_channels);
                }
              }
              if (want_params && c.l2 > 0.0f) {
                float* dk = grads.params[ii][0].data();
                for (std::size_t k = 0; k < state.params[0].size(); ++k) dk[k] += 2.0f * c.l2 * kernel[k];
              }
              return dx;
            },
            [&](const Dense& d) {
              const std::size_t in = rec.input.row_size();
              if (want_params) {
                gemm(rec.input.data(), Op::Transpose, grad.data(), Op::None, grads.params[ii][0].data(),
                     static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(d.out_dim), static_cast<Eigen::Index>(n),
                     false);
                float* db = grads.params[ii][1].data();
                for (std::size_t r = 0; r < n; ++r)
                  for (std::size_t c = 0; c < d.out_dim; ++c) db[c] += grad[r * d.out_dim + c];
              }
              Tensor dx(batched(n, in_shape));
              gemm(grad.data(), Op::None, state.params[0].data(), Op::Transpose, dx.data(), static_cast<Eigen::Index>(n),
                   static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(d.out_dim), false);
              return dx;
            },
            [&](const BatchNorm&) {
              const std::size_t channels = in_shape.back();
              const std::size_t groups = rec.input.size() / channels;
              const float* gamma = state.params[0].data();
              std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
              for (std::size_t r = 0; r < groups; ++r)
                for (std::size_t c = 0; c < channels; ++c) {
                  std::size_t idx = r * channels + c;
                  double xhat = (rec.input[idx] - rec.batch_mean[c]) * rec.inv_std[c];
                  sum_dy[c] += grad[idx];
                  sum_dy_xhat[c] += grad[idx] * xhat;
                }
              if (want_params) {
                for (std::size_t c = 0; c < channels; ++c) {
                  grads.params[ii][0][c] = static_cast<float>(sum_dy_xhat[c]);
                  grads.params[ii][1][c] = static_cast<float>(sum_dy[c]);
                }
              }
              Tensor dx(grad.shape());
              if (train) {
                const double m = static_cast<double>(groups);
                for (std::size_t r = 0; r < groups; ++r)
                  for (std::size_t c = 0; c < channels; ++c) {
                    std::size_t idx = r * channels + c;
                    double xhat = (rec.input[idx] - rec.batch_mean[c]) * rec.inv_std[c];
                    dx[idx] = static_cast<float>(gamma[c] * rec.inv_std[c] / m *
                                                 (m * grad[idx] - sum_dy[c] - xhat * sum_dy_xhat[c]));
                  }
              } else {
                for (std::size_t r = 0; r < groups; ++r)
                  for (std::size_t c = 0; c < channels; ++c) {
                    std::size_t idx = r * channels + c;
                    dx[idx] = grad[idx] * gamma[c] * rec.inv_std[c];
                  }
              }
              return dx;
            },
            [&](const MaxPool2x2&) {
              Tensor dx(batched(n, in_shape));
              for (std::size_t k = 0; k < grad.size(); ++k) dx[rec.argmax[k]] += grad[k];
              return dx;
            },
            [&](const Dropout&) {
              if (rec.dropout_mask.empty()) return grad;
              Tensor dx(grad.shape());
              for (std::size_t k = 0; k < grad.size(); ++k) dx[k] = grad[k] * rec.dropout_mask[k];
              return dx;
            },
            [&](const Activation& a) {
              Tensor dx(grad.shape());
              const Tensor& y = rec.output;
              if (a.fn == ActivationFn::ReLU) {
                for (std::size_t k = 0; k < grad.size(); ++k) dx[k] = y[k] > 0.0f ? grad[k] : 0.0f;
              } else {
                for (std::size_t k = 0; k < grad.size(); ++k) dx[k] = y[k] > 0.0f ? grad[k] : grad[k] * (y[k] + 1.0f);
              }
              return dx;
            },
            [&](const SoftmaxCrossEntropy&) { return grad; },
        },
        layers_[ii]);
    grad = std::move(next);
  }
  grads.input = std::move(grad);
  return grads;
}

void Network::update_running_statistics(const PassRecord& record) {
  check_record(record);
  if (record.mode_ != Mode::Train) return;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto* bn = std::get_if<BatchNorm>(&layers_[i]);
    if (!bn) continue;
    const LayerRecord& rec = record.layers_[i];
    const std::size_t channels = rec.batch_mean.size();
    const double groups = static_cast<double>(rec.input.size() / channels);
    const double unbias = groups > 1.0 ? groups / (groups - 1.0) : 1.0;
    float* rm = states_[i].statistics[0].data();
    float* rv = states_[i].statistics[1].data();
    for (std::size_t c = 0; c < channels; ++c) {
      rm[c] = static_cast<float>(bn->momentum * rm[c] + (1.0 - bn->momentum) * rec.batch_mean[c]);
      rv[c] = static_cast<float>(bn->momentum * rv[c] + (1.0 - bn->momentum) * rec.batch_var[c] * unbias);
    }
  }
  version_ = fresh_version();
}

double Network::regularization_loss() const {
  double total = 0.0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto* conv = std::get_if<Conv2D>(&layers_[i]);
    if (!conv || conv->l2 == 0.0f) continue;
    double sq = 0.0;
    for (float w : states_[i].params[0].values()) sq += static_cast<double>(w) * w;
    total += conv->l2 * sq;
  }
  return total;
}

// ---- loss helpers -------------------------------------------------------------

namespace {

void require_matrix(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError(-1, {0, 0}, logits.shape(), "expected a batch x classes matrix");
}

void check_labels(const Tensor& logits, std::span<const int> labels) {
  require_matrix(logits);
  if (labels.size() != logits.dim(0)) {
    throw ShapeError(-1, {logits.dim(0)}, {labels.size()}, "label count does not match batch size");
  }
  const int classes = static_cast<int>(logits.dim(1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw Error(ErrorKind::State, "label " + std::to_string(labels[i]) + " at position " + std::to_string(i) +
                                        " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// Softmax of one row in double precision.
void softmax_row(std::span<const float> z, std::vector<double>& out) {
  out.resize(z.size());
  double peak = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    out[j] = std::exp(static_cast<double>(z[j]) - peak);
    sum += out[j];
  }
  for (auto& v : out) v /= sum;
}

}  // namespace

Tensor softmax_probs(const Tensor& logits) {
  require_matrix(logits);
  Tensor probs(logits.shape());
  std::vector<double> row;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    softmax_row(logits.row(i), row);
    auto dest = probs.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) dest[j] = static_cast<float>(row[j]);
  }
  return probs;
}

double loss_forward(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    auto z = logits.row(i);
    double peak = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (float v : z) sum += std::exp(static_cast<double>(v) - peak);
    total += peak + std::log(sum) - static_cast<double>(z[static_cast<std::size_t>(labels[i])]);
  }
  return logits.dim(0) ? total / static_cast<double>(logits.dim(0)) : 0.0;
}

Tensor loss_backward(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  Tensor grad(logits.shape());
  const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(1, logits.dim(0)));
  std::vector<double> row;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    softmax_row(logits.row(i), row);
    row[static_cast<std::size_t>(labels[i])] -= 1.0;
    auto dest = grad.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) dest[j] = static_cast<float>(row[j] * scale);
  }
  return grad;
}

std::vector<int> row_argmax(const Tensor& matrix) {
  require_matrix(matrix);
  std::vector<int> out(matrix.dim(0));
  for (std::size_t i = 0; i < matrix.dim(0); ++i) {
    auto r = matrix.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

}  // namespace targetforge
