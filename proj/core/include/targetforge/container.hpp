#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "targetforge/tensor.hpp"

namespace targetforge {

// Binary layout, all integers little-endian:
//   8-byte magic | u32 version | u64 metadata length | metadata (canonical JSON)
//   then per tensor: u64 element count | float32 payload
// The metadata lists {name, shape} for each tensor in payload order.

inline constexpr std::string_view kCheckpointMagic = "TFORGECK";
inline constexpr std::string_view kAdversarialMagic = "TFORGEAD";
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(std::string_view name) const;
};

std::string encode_container(std::string_view magic, const Container& container);
Container decode_container(std::string_view bytes, std::string_view magic);

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& container);
Container read_container(const std::filesystem::path& path, std::string_view magic);

/// Writes bytes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Sorted keys, no whitespace.
std::string canonical_json(const nlohmann::json& j);

}  // namespace targetforge
