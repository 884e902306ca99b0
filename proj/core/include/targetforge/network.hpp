#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "targetforge/layers.hpp"
#include "targetforge/tensor.hpp"

namespace targetforge {

struct ForwardOptions {
  Mode mode = Mode::Eval;
  std::uint64_t dropout_seed = 0;
};

// Intermediates kept by forward for the matching backward call.
struct LayerRecord {
  Tensor input;
  Tensor output;
  Tensor dropout_mask;                 // Dropout, Train mode; already scaled
  std::vector<std::uint32_t> argmax;   // MaxPool2x2: flat input offset per output
  std::vector<float> batch_mean;       // BatchNorm, Train mode
  std::vector<float> batch_var;        // biased
  std::vector<float> inv_std;
};

class Network;

class PassRecord {
 public:
  PassRecord() = default;

  bool valid() const noexcept { return owner_ != nullptr; }
  Mode mode() const noexcept { return mode_; }
  const Tensor& logits() const noexcept { return logits_; }
  std::span<const LayerRecord> layers() const noexcept { return layers_; }

 private:
  friend class Network;
  const Network* owner_ = nullptr;
  std::uint64_t version_ = 0;
  Mode mode_ = Mode::Eval;
  std::vector<LayerRecord> layers_;
  Tensor logits_;
};

enum class GradientScope { InputOnly, ParametersAndInput };

struct Gradients {
  std::vector<std::vector<Tensor>> params;  // per layer, parallel to LayerState::params
  Tensor input;
};

/// A fixed sequence of layers over NHWC input with reverse-mode gradients.
/// Forward and backward are const and safe to call concurrently; parameter
/// updates go through mutable_state(), which invalidates outstanding records.
class Network {
 public:
  Network() = default;
  /// `input_shape` is the per-sample (H, W, C) shape.
  Network(Shape input_shape, std::vector<LayerKind> layers);
  Network(const Network& other);
  Network(Network&& other) noexcept;
  Network& operator=(const Network& other);
  Network& operator=(Network&& other) noexcept;
  ~Network() = default;

  /// He-uniform kernels for layers feeding an activation, Glorot-uniform for
  /// the logits layer, zero biases, unit BatchNorm scale.
  void initialize(std::uint64_t seed);

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<LayerKind>& layers() const noexcept { return layers_; }
  const std::vector<LayerState>& states() const noexcept { return states_; }
  LayerState& mutable_state(std::size_t layer);
  /// Per-sample output shape of each layer.
  const std::vector<Shape>& layer_shapes() const noexcept { return layer_shapes_; }
  std::size_t output_size() const;
  std::uint64_t version() const noexcept { return version_; }

  PassRecord forward(const Tensor& batch, const ForwardOptions& options = {}) const;
  Tensor logits(const Tensor& batch) const { return forward(batch).logits(); }

  /// Gradient of sum_ij logits_grad_ij * logits_ij (+ the kernel regularizer
  /// when parameter gradients are requested).
  Gradients backward(const PassRecord& record, const Tensor& logits_grad,
                     GradientScope scope = GradientScope::ParametersAndInput) const;

  /// Folds Train-mode batch statistics into the BatchNorm running averages.
  void update_running_statistics(const PassRecord& record);

  double regularization_loss() const;

 private:
  Shape input_shape_;
  std::vector<LayerKind> layers_;
  std::vector<LayerState> states_;
  std::vector<Shape> layer_shapes_;
  std::uint64_t version_ = 0;  // process-unique; refreshed on copy and mutation

  void check_record(const PassRecord& record) const;
};

Tensor softmax_probs(const Tensor& logits);

/// Mean softmax cross-entropy over the batch.
double loss_forward(const Tensor& logits, std::span<const int> labels);

/// d(mean cross-entropy)/d(logits).
Tensor loss_backward(const Tensor& logits, std::span<const int> labels);

/// Lowest index among maximal entries of each row.
std::vector<int> row_argmax(const Tensor& matrix);

}  // namespace targetforge
