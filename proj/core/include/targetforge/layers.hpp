#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "targetforge/tensor.hpp"

namespace targetforge {

enum class Mode { Train, Eval };
enum class ActivationFn { ReLU, ELU };

/// Stride-1 convolution with "same" padding. Kernel layout (kh, kw, in, out).
struct Conv2D {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t out_channels = 0;
  float l2 = 1e-4f;  // kernel regularizer coefficient, adds l2 * sum(W^2)
};

/// Fully connected; flattens any per-sample input shape. Kernel layout (in, out).
struct Dense {
  std::size_t out_dim = 0;
};

/// Per-channel for NHWC input, per-feature for flat input.
struct BatchNorm {
  float momentum = 0.99f;
  float epsilon = 1e-5f;
};

/// 2x2 window, stride 2, odd trailing rows/columns dropped.
struct MaxPool2x2 {};

/// Inverted dropout: kept units are scaled by 1 / (1 - rate) in Train mode.
struct Dropout {
  float rate = 0.0f;
};

struct Activation {
  ActivationFn fn = ActivationFn::ReLU;
};

/// Marks the logits output; loss and probabilities are computed from it.
struct SoftmaxCrossEntropy {};

using LayerKind =
    std::variant<Conv2D, Dense, BatchNorm, MaxPool2x2, Dropout, Activation, SoftmaxCrossEntropy>;

/// Learned parameters and running statistics of one layer.
///   Conv2D / Dense: params = {kernel, bias}
///   BatchNorm:      params = {gamma, beta}, statistics = {running_mean, running_var}
struct LayerState {
  std::vector<Tensor> params;
  std::vector<Tensor> statistics;
};

std::string describe(const LayerKind& layer);
std::vector<std::string> parameter_names(const LayerKind& layer);
std::vector<std::string> statistic_names(const LayerKind& layer);

/// Throws ConfigError for out-of-range hyperparameters.
void validate_layer(const LayerKind& layer, std::size_t index);

}  // namespace targetforge
