#include "targetforge/model.hpp"

#include <algorithm>

#include "targetforge/error.hpp"
#include "targetforge/parallel.hpp"

namespace targetforge {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

constexpr std::size_t kPredictChunk = 256;

std::size_t scaled(std::size_t width, std::size_t divisor) {
  return std::max<std::size_t>(1, width / std::max<std::size_t>(1, divisor));
}

void check_multiplier(int multiplier) {
  if (multiplier < 1 || multiplier > 3) {
    throw ConfigError({"class multiplier must be 1, 2 or 3 (got " + std::to_string(multiplier) + ")"});
  }
}

}  // namespace

ModelSpec build_mnist_spec(int multiplier, const ArchitectureOptions& options) {
  check_multiplier(multiplier);
  const std::size_t d = options.width_divisor;
  const auto relu = Activation{ActivationFn::ReLU};
  ModelSpec spec;
  spec.architecture = "mnist";
  spec.input_shape = options.input_shape.empty() ? Shape{28, 28, 1} : options.input_shape;
  spec.base_classes = options.base_classes;
  spec.class_multiplier = multiplier;
  spec.layers = {
      Conv2D{3, 3, scaled(32, d)}, relu, BatchNorm{},
      Conv2D{3, 3, scaled(64, d)}, relu, BatchNorm{},
      MaxPool2x2{}, Dropout{0.25f},
      Dense{scaled(128, d)}, relu, Dropout{0.5f},
      Dense{spec.num_outputs()}, SoftmaxCrossEntropy{},
  };
  return spec;
}

ModelSpec build_cifar_spec(int multiplier, const ArchitectureOptions& options) {
  check_multiplier(multiplier);
  const std::size_t d = options.width_divisor;
  const auto elu = Activation{ActivationFn::ELU};
  ModelSpec spec;
  spec.architecture = "cifar10";
  spec.input_shape = options.input_shape.empty() ? Shape{32, 32, 3} : options.input_shape;
  spec.base_classes = options.base_classes;
  spec.class_multiplier = multiplier;
  const float drop[3] = {0.2f, 0.3f, 0.4f};
  for (int block = 0; block < 3; ++block) {
    std::size_t width = scaled(32u << block, d);
    spec.layers.insert(spec.layers.end(), {Conv2D{3, 3, width}, elu, BatchNorm{}, Conv2D{3, 3, width}, elu,
                                           BatchNorm{}, MaxPool2x2{}, Dropout{drop[block]}});
  }
  spec.layers.push_back(Dense{spec.num_outputs()});
  spec.layers.push_back(SoftmaxCrossEntropy{});
  return spec;
}

void validate_spec(const ModelSpec& spec) {
  std::vector<std::string> problems;
  if (spec.input_shape.size() != 3 || shape_size(spec.input_shape) == 0) {
    problems.push_back("input shape must be (H, W, C) with positive dims, got " + format_shape(spec.input_shape));
  }
  if (spec.base_classes == 0) problems.push_back("base_classes must be positive");
  if (spec.class_multiplier < 1 || spec.class_multiplier > 3) {
    problems.push_back("class_multiplier must be 1, 2 or 3, got " + std::to_string(spec.class_multiplier));
  }
  const std::size_t n = spec.layers.size();
  if (n < 2 || !std::holds_alternative<SoftmaxCrossEntropy>(spec.layers[n - 1]) ||
      !std::holds_alternative<Dense>(spec.layers[n - 2])) {
    problems.push_back("final layers must be Dense followed by Softmax");
  } else if (std::get<Dense>(spec.layers[n - 2]).out_dim != spec.num_outputs()) {
    problems.push_back("final Dense width " + std::to_string(std::get<Dense>(spec.layers[n - 2]).out_dim) +
                       " != base_classes * class_multiplier = " + std::to_string(spec.num_outputs()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    try {
      validate_layer(spec.layers[i], i);
    } catch (const ConfigError& e) {
      problems.insert(problems.end(), e.problems().begin(), e.problems().end());
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

nlohmann::json layer_to_json(const LayerKind& layer) {
  return std::visit(
      Overloaded{
          [](const Conv2D& c) {
            return nlohmann::json{{"type", "conv2d"}, {"kernel", {c.kernel_h, c.kernel_w}},
                                  {"out_channels", c.out_channels}, {"l2", c.l2}};
          },
          [](const Dense& d) { return nlohmann::json{{"type", "dense"}, {"out_dim", d.out_dim}}; },
          [](const BatchNorm& b) {
            return nlohmann::json{{"type", "batchnorm"}, {"momentum", b.momentum}, {"epsilon", b.epsilon}};
          },
          [](const MaxPool2x2&) { return nlohmann::json{{"type", "maxpool2x2"}}; },
          [](const Dropout& d) { return nlohmann::json{{"type", "dropout"}, {"rate", d.rate}}; },
          [](const Activation& a) {
            return nlohmann::json{{"type", a.fn == ActivationFn::ELU ? "elu" : "relu"}};
          },
          [](const SoftmaxCrossEntropy&) { return nlohmann::json{{"type", "softmax"}}; },
      },
      layer);
}

LayerKind layer_from_json(const nlohmann::json& j) {
  try {
    const std::string type = j.at("type").get<std::string>();
    if (type == "conv2d") {
      return Conv2D{j.at("kernel").at(0).get<std::size_t>(), j.at("kernel").at(1).get<std::size_t>(),
                    j.at("out_channels").get<std::size_t>(), j.value("l2", 1e-4f)};
    }
    if (type == "dense") return Dense{j.at("out_dim").get<std::size_t>()};
    if (type == "batchnorm") return BatchNorm{j.value("momentum", 0.99f), j.value("epsilon", 1e-5f)};
    if (type == "maxpool2x2") return MaxPool2x2{};
    if (type == "dropout") return Dropout{j.at("rate").get<float>()};
    if (type == "relu") return Activation{ActivationFn::ReLU};
    if (type == "elu") return Activation{ActivationFn::ELU};
    if (type == "softmax") return SoftmaxCrossEntropy{};
    throw Error(ErrorKind::Format, "unknown layer type '" + type + "'");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed layer description: ") + e.what());
  }
}

nlohmann::json spec_to_json(const ModelSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : spec.layers) layers.push_back(layer_to_json(layer));
  return {{"architecture", spec.architecture},
          {"input_shape", spec.input_shape},
          {"base_classes", spec.base_classes},
          {"class_multiplier", spec.class_multiplier},
          {"layers", layers}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  try {
    spec.architecture = j.at("architecture").get<std::string>();
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.base_classes = j.at("base_classes").get<std::size_t>();
    spec.class_multiplier = j.at("class_multiplier").get<int>();
    for (const auto& layer : j.at("layers")) spec.layers.push_back(layer_from_json(layer));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed model spec: ") + e.what());
  }
  return spec;
}

TrainedModel::TrainedModel(ModelSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
  validate_spec(spec_);
  network_ = Network(spec_.input_shape, spec_.layers);
  network_.initialize(init_seed);
  provenance_ = {{"init_seed", init_seed}};
}

TrainedModel::TrainedModel(ModelSpec spec, Network network, nlohmann::json provenance)
    : spec_(std::move(spec)), network_(std::move(network)), provenance_(std::move(provenance)) {
  validate_spec(spec_);
}

Tensor predict_probs(const TrainedModel& model, const Tensor& batch, int workers) {
  const Network& net = model.network();
  if (batch.rank() != 4) {
    Shape expected{0};
    expected.insert(expected.end(), net.input_shape().begin(), net.input_shape().end());
    throw ShapeError(0, expected, batch.shape(), "input batch does not match network input shape");
  }
  const std::size_t n = batch.dim(0);
  Tensor probs({n, model.num_outputs()});
  const std::size_t chunks = (n + kPredictChunk - 1) / kPredictChunk;
  parallel_for(chunks, workers, [&](std::size_t c) {
    std::size_t begin = c * kPredictChunk;
    std::size_t end = std::min(n, begin + kPredictChunk);
    probs.set_rows(begin, softmax_probs(net.logits(batch.slice_rows(begin, end))));
  });
  return probs;
}

std::vector<int> infer_class_from_probs(const Tensor& probs, std::size_t base_classes, int multiplier) {
  const std::size_t m = static_cast<std::size_t>(multiplier);
  if (probs.rank() != 2 || probs.dim(1) != base_classes * m) {
    throw ShapeError(-1, {probs.rank() ? probs.dim(0) : 0, base_classes * m}, probs.shape(),
                     "probability matrix width must be base_classes * multiplier");
  }
  std::vector<int> out(probs.dim(0));
  for (std::size_t r = 0; r < probs.dim(0); ++r) {
    auto row = probs.row(r);
    int best = 0;
    double best_score = -1.0;
    for (std::size_t i = 0; i < base_classes; ++i) {
      double score = 0.0;
      for (std::size_t j = 0; j < m; ++j) score += row[i + j * base_classes];
      if (score > best_score) {
        best_score = score;
        best = static_cast<int>(i);
      }
    }
    out[r] = best;
  }
  return out;
}

std::vector<int> infer_class(const TrainedModel& model, const Tensor& batch, int workers) {
  return infer_class_from_probs(predict_probs(model, batch, workers), model.base_classes(), model.multiplier());
}

}  // namespace targetforge
