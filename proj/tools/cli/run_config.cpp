#include "run_config.hpp"

#include <algorithm>

#include "targetforge/container.hpp"
#include "targetforge/error.hpp"

namespace targetforge::cli {

namespace {

void reject_unknown(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> known,
                    std::vector<std::string>& problems) {
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      problems.push_back("unknown field " + (section.empty() ? key : section + "." + key));
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const std::string& section, const char* key, T& field,
          std::vector<std::string>& problems) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    problems.push_back(section + "." + key + " has the wrong type");
  }
}

const nlohmann::json* section(const nlohmann::json& j, const char* key, std::vector<std::string>& problems) {
  if (!j.contains(key)) return nullptr;
  if (!j[key].is_object()) {
    problems.push_back(std::string(key) + " must be an object");
    return nullptr;
  }
  return &j[key];
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError({"run configuration must be an object"});
  RunConfig c;
  std::vector<std::string> p;
  reject_unknown(j, "", {"dataset", "model", "train", "attacks", "eval", "output_dir"}, p);

  if (const auto* d = section(j, "dataset", p)) {
    reject_unknown(*d, "dataset", {"name", "path", "seed", "train_size", "test_size"}, p);
    read(*d, "dataset", "name", c.dataset.name, p);
    read(*d, "dataset", "path", c.dataset.path, p);
    read(*d, "dataset", "seed", c.dataset.seed, p);
    read(*d, "dataset", "train_size", c.dataset.train_size, p);
    read(*d, "dataset", "test_size", c.dataset.test_size, p);
  }
  if (const auto* m = section(j, "model", p)) {
    reject_unknown(*m, "model", {"architecture", "multiplier", "width_divisor"}, p);
    read(*m, "model", "architecture", c.model.architecture, p);
    read(*m, "model", "multiplier", c.model.multiplier, p);
    read(*m, "model", "width_divisor", c.model.width_divisor, p);
  }
  if (const auto* t = section(j, "train", p)) {
    if (!t->contains("seed")) p.push_back("train.seed is required");
    try {
      c.train = train_config_from_json(*t);
    } catch (const ConfigError& e) {
      p.insert(p.end(), e.problems().begin(), e.problems().end());
    }
  } else {
    p.push_back("train.seed is required");
  }
  if (j.contains("attacks")) {
    if (!j["attacks"].is_array()) {
      p.push_back("attacks must be a list");
    } else {
      for (std::size_t i = 0; i < j["attacks"].size(); ++i) {
        try {
          c.attacks.push_back(attack_from_json(j["attacks"][i]));
        } catch (const ConfigError& e) {
          for (const auto& s : e.problems()) p.push_back("attacks[" + std::to_string(i) + "]: " + s);
        }
      }
    }
  }
  if (const auto* e = section(j, "eval", p)) {
    reject_unknown(*e, "eval", {"seed", "n_samples"}, p);
    read(*e, "eval", "seed", c.eval.seed, p);
    read(*e, "eval", "n_samples", c.eval.n_samples, p);
  }
  read(j, "run", "output_dir", c.output_dir, p);
  try {
    validate_run_config(c);
  } catch (const ConfigError& e) {
    for (const auto& s : e.problems())
      if (std::find(p.begin(), p.end(), s) == p.end()) p.push_back(s);
  }
  if (!p.empty()) throw ConfigError(std::move(p));
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json attacks = nlohmann::json::array();
  for (const auto& a : c.attacks) attacks.push_back(attack_to_json(a));
  return {{"dataset",
           {{"name", c.dataset.name},
            {"path", c.dataset.path},
            {"seed", c.dataset.seed},
            {"train_size", c.dataset.train_size},
            {"test_size", c.dataset.test_size}}},
          {"model",
           {{"architecture", c.model.architecture},
            {"multiplier", c.model.multiplier},
            {"width_divisor", c.model.width_divisor}}},
          {"train", train_config_to_json(c.train)},
          {"attacks", attacks},
          {"eval", {{"seed", c.eval.seed}, {"n_samples", c.eval.n_samples}}},
          {"output_dir", c.output_dir}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError({"config file " + path.string() + " does not exist"});
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return run_config_from_json(j);
}

void validate_run_config(const RunConfig& c) {
  std::vector<std::string> p;
  const auto& d = c.dataset;
  if (d.name != "toy" && d.name != "mnist" && d.name != "cifar10") {
    p.push_back("dataset.name must be toy, mnist or cifar10 (got '" + d.name + "')");
  }
  if (!d.path.empty() && !std::filesystem::exists(d.path)) p.push_back("dataset.path " + d.path + " does not exist");
  if (d.name == "toy" && (d.train_size == 0 || d.test_size == 0)) p.push_back("toy dataset sizes must be >= 1");
  if (c.model.architecture != "mnist" && c.model.architecture != "cifar10") {
    p.push_back("model.architecture must be mnist or cifar10 (got '" + c.model.architecture + "')");
  }
  if (c.model.width_divisor == 0) p.push_back("model.width_divisor must be >= 1");
  if (c.model.multiplier < 0 || c.model.multiplier > 3) p.push_back("model.multiplier must be 1, 2 or 3");
  for (std::size_t i = 0; i < c.attacks.size(); ++i) {
    try {
      validate_attack(c.attacks[i]);
    } catch (const ConfigError& e) {
      for (const auto& s : e.problems()) p.push_back("attacks[" + std::to_string(i) + "]: " + s);
    }
  }
  if (p.empty()) {
    try {
      validate_train_config(c.train, resolve_spec(c));
    } catch (const ConfigError& e) {
      p.insert(p.end(), e.problems().begin(), e.problems().end());
    }
  }
  if (!p.empty()) throw ConfigError(std::move(p));
}

std::filesystem::path dataset_dir(const DatasetConfig& d) {
  return d.path.empty() ? data_root() / d.name : std::filesystem::path(d.path);
}

DatasetPair load_datasets(const DatasetConfig& d) {
  if (d.name == "toy") {
    ToyOptions o;
    o.train_size = d.train_size;
    o.test_size = d.test_size;
    return make_toy_dataset(d.seed, o);
  }
  if (d.name == "mnist") return load_mnist(dataset_dir(d));
  if (d.name == "cifar10") return load_cifar10(dataset_dir(d));
  throw ConfigError({"unknown dataset '" + d.name + "'"});
}

Shape dataset_sample_shape(const DatasetConfig& d) {
  if (d.name == "toy") return {8, 8, 1};
  if (d.name == "cifar10") return {32, 32, 3};
  return {28, 28, 1};
}

std::size_t dataset_classes(const DatasetConfig& d) { return d.name == "toy" ? 4 : 10; }

ModelSpec resolve_spec(const RunConfig& c) {
  ArchitectureOptions o;
  o.input_shape = dataset_sample_shape(c.dataset);
  o.base_classes = dataset_classes(c.dataset);
  o.width_divisor = c.model.width_divisor;
  int m = c.model.multiplier ? c.model.multiplier : required_multiplier(c.train.defense);
  return c.model.architecture == "cifar10" ? build_cifar_spec(m, o) : build_mnist_spec(m, o);
}

}  // namespace targetforge::cli
