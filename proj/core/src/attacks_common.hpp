#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "targetforge/attacks.hpp"
#include "targetforge/parallel.hpp"

namespace targetforge::detail {

// Attacks work on fixed-size chunks so results do not depend on the worker count.
inline constexpr std::size_t kAttackChunk = 64;

template <typename Fn>
void for_each_chunk(std::size_t n, int workers, Fn&& fn) {
  std::size_t chunks = (n + kAttackChunk - 1) / kAttackChunk;
  parallel_for(chunks, workers, [&](std::size_t c) {
    std::size_t begin = c * kAttackChunk;
    fn(begin, std::min(n, begin + kAttackChunk));
  });
}

inline float clip01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

/// Shape and label-range checks shared by every attack.
void check_batch(const TrainedModel& model, const Tensor& x, std::span<const int> labels);

/// d(sum of per-sample cross-entropy)/d(logits).
Tensor cross_entropy_logit_gradient(const Tensor& logits, std::span<const int> labels);

/// Gradient of the summed cross-entropy with respect to x, Eval mode.
Tensor cross_entropy_input_gradient(const Network& net, const Tensor& x, std::span<const int> labels);

AdvBatch start_batch(const Tensor& x, std::span<const int> labels);

/// Clips into [0, 1], then fills norms and the success mask.
void finalize(const TrainedModel& model, const Tensor& x, AdvBatch& out, int workers);

/// DeepFool on one chunk: writes adversarial rows into `out`.
void deepfool_chunk(const Network& net, const Tensor& x, std::span<const int> labels, const DeepFool& cfg,
                    Tensor& out, std::vector<std::uint8_t>& converged, std::vector<int>& iterations);

}  // namespace targetforge::detail
