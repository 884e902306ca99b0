#include <benchmark/benchmark.h>

#include "targetforge/attacks.hpp"
#include "targetforge/data.hpp"
#include "targetforge/rng.hpp"
#include "targetforge/training.hpp"

using namespace targetforge;

namespace {

TrainedModel mnist_model(std::size_t width_divisor) {
  ArchitectureOptions o;
  o.width_divisor = width_divisor;
  return TrainedModel(build_mnist_spec(2, o), 1);
}

Tensor random_images(std::size_t n, const Shape& sample, std::uint64_t seed) {
  Shape s = {n};
  s.insert(s.end(), sample.begin(), sample.end());
  Tensor t(s);
  Rng rng(seed);
  for (float& v : t.values()) v = rng.uniform_float();
  return t;
}

std::vector<int> labels(std::size_t n) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 10);
  return y;
}

}  // namespace

static void BM_ConvForward(benchmark::State& state) {
  Network net({28, 28, 16}, {Conv2D{3, 3, 32}});
  net.initialize(1);
  Tensor x = random_images(static_cast<std::size_t>(state.range(0)), {28, 28, 16}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(net.logits(x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ConvForward)->Arg(1)->Arg(32);

static void BM_ConvBackward(benchmark::State& state) {
  Network net({28, 28, 16}, {Conv2D{3, 3, 32}});
  net.initialize(1);
  Tensor x = random_images(static_cast<std::size_t>(state.range(0)), {28, 28, 16}, 2);
  PassRecord rec = net.forward(x, {Mode::Eval, 0});
  Tensor g = Tensor::zeros_like(rec.logits());
  for (float& v : g.values()) v = 1.0f;
  for (auto _ : state) benchmark::DoNotOptimize(net.backward(rec, g, GradientScope::ParametersAndInput));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ConvBackward)->Arg(1)->Arg(32);

static void BM_PredictMnist(benchmark::State& state) {
  TrainedModel m = mnist_model(1);
  Tensor x = random_images(static_cast<std::size_t>(state.range(0)), m.spec().input_shape, 3);
  for (auto _ : state) benchmark::DoNotOptimize(predict_probs(m, x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PredictMnist)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_FgsmMnist(benchmark::State& state) {
  TrainedModel m = mnist_model(1);
  Tensor x = random_images(64, m.spec().input_shape, 4);
  auto y = labels(64);
  for (auto _ : state) benchmark::DoNotOptimize(fgsm(m, x, y, Fgsm{0.3f}));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_FgsmMnist)->Unit(benchmark::kMillisecond);

static void BM_TrainStepMnist(benchmark::State& state) {
  TrainedModel m = mnist_model(1);
  Tensor x = random_images(128, m.spec().input_shape, 5);
  auto y = labels(128);
  OptimizerState opt;
  std::uint64_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(m, x, y, opt, AdamConfig{}, ++step));
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_TrainStepMnist)->Unit(benchmark::kMillisecond);

static void BM_DeepFoolToy(benchmark::State& state) {
  ArchitectureOptions o;
  o.input_shape = {8, 8, 1};
  o.base_classes = 4;
  o.width_divisor = 2;
  TrainedModel m(build_mnist_spec(2, o), 1);
  DatasetPair d = make_toy_dataset(1, {16, 64});
  for (auto _ : state) benchmark::DoNotOptimize(deepfool(m, d.test.images, d.test.labels, DeepFool{}));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_DeepFoolToy)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
