#include "targetforge/checkpoint.hpp"

#include "targetforge/error.hpp"

namespace targetforge {

Container model_to_container(const TrainedModel& model) {
  Container out;
  out.metadata = {{"spec", spec_to_json(model.spec())}, {"provenance", model.provenance()}};
  const Network& net = model.network();
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const LayerState& state = net.states()[i];
    auto params = parameter_names(net.layers()[i]);
    auto stats = statistic_names(net.layers()[i]);
    std::string prefix = "layer" + std::to_string(i) + ".";
    for (std::size_t p = 0; p < params.size(); ++p) out.tensors.push_back({prefix + params[p], state.params[p]});
    for (std::size_t s = 0; s < stats.size(); ++s) out.tensors.push_back({prefix + stats[s], state.statistics[s]});
  }
  return out;
}

TrainedModel model_from_container(const Container& container) {
  if (!container.metadata.contains("spec")) throw Error(ErrorKind::Format, "checkpoint metadata lacks a model spec");
  ModelSpec spec = spec_from_json(container.metadata["spec"]);
  validate_spec(spec);
  Network net(spec.input_shape, spec.layers);

  std::size_t next = 0;
  auto take = [&](const std::string& name, const Tensor& like) -> const Tensor& {
    if (next >= container.tensors.size()) {
      throw Error(ErrorKind::Format, "checkpoint is missing tensor '" + name + "'");
    }
    const NamedTensor& t = container.tensors[next++];
    if (t.name != name) {
      throw Error(ErrorKind::Format, "checkpoint tensor '" + t.name + "' found where '" + name + "' was expected");
    }
    if (t.tensor.shape() != like.shape()) {
      throw ShapeError(-1, like.shape(), t.tensor.shape(), "checkpoint tensor '" + name + "' has the wrong shape");
    }
    return t.tensor;
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    auto params = parameter_names(spec.layers[i]);
    auto stats = statistic_names(spec.layers[i]);
    if (params.empty() && stats.empty()) continue;
    LayerState& state = net.mutable_state(i);
    std::string prefix = "layer" + std::to_string(i) + ".";
    for (std::size_t p = 0; p < params.size(); ++p) state.params[p] = take(prefix + params[p], state.params[p]);
    for (std::size_t s = 0; s < stats.size(); ++s) {
      state.statistics[s] = take(prefix + stats[s], state.statistics[s]);
    }
  }
  if (next != container.tensors.size()) {
    throw Error(ErrorKind::Format, "checkpoint has unexpected extra tensor '" + container.tensors[next].name + "'");
  }
  return TrainedModel(std::move(spec), std::move(net), container.metadata.value("provenance", nlohmann::json::object()));
}

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  write_container(path, kCheckpointMagic, model_to_container(model));
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  return model_from_container(read_container(path, kCheckpointMagic));
}

}  // namespace targetforge
