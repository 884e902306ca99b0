#include "targetforge/layers.hpp"

#include <sstream>

#include "targetforge/error.hpp"

namespace targetforge {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

std::string describe(const LayerKind& layer) {
  std::ostringstream out;
  std::visit(Overloaded{
                 [&](const Conv2D& c) {
                   out << "Conv2D " << c.kernel_h << 'x' << c.kernel_w << 'x' << c.out_channels;
                 },
                 [&](const Dense& d) { out << "Dense " << d.out_dim; },
                 [&](const BatchNorm&) { out << "BatchNorm"; },
                 [&](const MaxPool2x2&) { out << "MaxPool 2x2"; },
                 [&](const Dropout& d) { out << "Dropout " << d.rate; },
                 [&](const Activation& a) { out << (a.fn == ActivationFn::ELU ? "ELU" : "ReLU"); },
                 [&](const SoftmaxCrossEntropy&) { out << "Softmax"; },
             },
             layer);
  return out.str();
}

std::vector<std::string> parameter_names(const LayerKind& layer) {
  if (std::holds_alternative<Conv2D>(layer) || std::holds_alternative<Dense>(layer)) {
    return {"kernel", "bias"};
  }
  if (std::holds_alternative<BatchNorm>(layer)) return {"gamma", "beta"};
  return {};
}

std::vector<std::string> statistic_names(const LayerKind& layer) {
  if (std::holds_alternative<BatchNorm>(layer)) return {"running_mean", "running_var"};
  return {};
}

void validate_layer(const LayerKind& layer, std::size_t index) {
  std::vector<std::string> problems;
  std::string where = "layer " + std::to_string(index) + " (" + describe(layer) + "): ";
  std::visit(Overloaded{
                 [&](const Conv2D& c) {
                   if (c.kernel_h == 0 || c.kernel_w == 0) problems.push_back(where + "kernel dims must be positive");
                   if (c.out_channels == 0) problems.push_back(where + "out_channels must be positive");
                   if (!(c.l2 >= 0.0f)) problems.push_back(where + "l2 coefficient must be >= 0");
                 },
                 [&](const Dense& d) {
                   if (d.out_dim == 0) problems.push_back(where + "out_dim must be positive");
                 },
                 [&](const BatchNorm& b) {
                   if (!(b.momentum >= 0.0f && b.momentum < 1.0f)) problems.push_back(where + "momentum must be in [0,1)");
                   if (!(b.epsilon > 0.0f)) problems.push_back(where + "epsilon must be positive");
                 },
                 [&](const Dropout& d) {
                   if (!(d.rate >= 0.0f && d.rate < 1.0f)) problems.push_back(where + "rate must be in [0,1)");
                 },
                 [](const auto&) {},
             },
             layer);
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

}  // namespace targetforge
