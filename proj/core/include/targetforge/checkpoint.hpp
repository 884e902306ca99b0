#pragma once

#include <filesystem>

#include "targetforge/container.hpp"
#include "targetforge/model.hpp"

namespace targetforge {

/// Tensors are named "layer{i}.{param}" in layer order, parameters before statistics.
Container model_to_container(const TrainedModel& model);
TrainedModel model_from_container(const Container& container);

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace targetforge
