#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "targetforge/attacks.hpp"
#include "targetforge/tensor.hpp"

namespace targetforge {

enum class Split { Train, Test };

struct Dataset {
  Tensor images;            // (N, H, W, C), values in [0, 1]
  std::vector<int> labels;  // in [0, num_classes)
  std::string name;
  Split split = Split::Train;
  std::size_t num_classes = 10;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Throws Error(Data) when counts disagree, pixels leave [0, 1] or labels leave range.
void validate_dataset(const Dataset& dataset);

struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// Expects the four uncompressed IDX files in `dir`.
DatasetPair load_mnist(const std::filesystem::path& dir);
Dataset read_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         const std::string& name, Split split);

/// Expects data_batch_{1..5}.bin and test_batch.bin in `dir` or in dir/cifar-10-batches-bin.
DatasetPair load_cifar10(const std::filesystem::path& dir);
inline constexpr std::size_t kCifarRecordBytes = 3073;
Dataset read_cifar_batches(const std::vector<std::filesystem::path>& files, const std::string& name, Split split);

struct ToyOptions {
  std::size_t train_size = 2000;
  std::size_t test_size = 400;
  float high = 0.75f;
  float low = 0.25f;
  float noise = 0.05f;
};

/// Four classes on 8x8x1 images; class c brightens quadrant c.
DatasetPair make_toy_dataset(std::uint64_t seed, const ToyOptions& options = {});

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// One shuffled pass over a dataset; the last partial batch is kept.
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed);

  bool next(Batch& batch);
  std::size_t batch_count() const noexcept;
  std::span<const std::size_t> order() const noexcept { return order_; }

 private:
  const Dataset* dataset_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// TARGETFORGE_DATA_DIR if set, otherwise ./data.
std::filesystem::path data_root();

/// Adversarial samples plus labels, norms and masks in the container format.
void save_adversarial(const std::filesystem::path& path, const AdvBatch& batch, const nlohmann::json& metadata);
AdvBatch load_adversarial(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

struct FetchedFile {
  std::string name;
  std::string url;
  std::string md5;
  std::string sha256;
  std::uint64_t bytes = 0;
};

/// Downloads and unpacks "mnist" or "cifar10" into `dir`, verifying archive checksums.
/// `mirror` replaces the canonical base URL (file:// URLs work).
std::vector<FetchedFile> fetch_dataset(const std::string& name, const std::filesystem::path& dir,
                                       const std::string& mirror = "");

}  // namespace targetforge
