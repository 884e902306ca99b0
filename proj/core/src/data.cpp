#include "targetforge/data.hpp"

#include <cstdlib>
#include <numeric>

#include "targetforge/container.hpp"
#include "targetforge/error.hpp"
#include "targetforge/rng.hpp"

namespace targetforge {

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t offset) {
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

std::string read_data_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::Data, "dataset file " + path.string() +
                                     " not found (download it with `targetforge fetch-data` or set TARGETFORGE_DATA_DIR)");
  }
  return read_file(path);
}

// Returns dims after validating magic and that the payload is complete.
std::vector<std::size_t> idx_header(const std::string& bytes, std::uint32_t magic, const std::string& what) {
  if (bytes.size() < 4) throw Error(ErrorKind::Data, what + ": truncated IDX header");
  std::uint32_t got = read_be32(bytes, 0);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x (expected 0x%08x)", got, magic);
    throw Error(ErrorKind::Data, what + ": " + buf);
  }
  std::size_t rank = magic & 0xff;
  if (bytes.size() < 4 + 4 * rank) throw Error(ErrorKind::Data, what + ": truncated IDX header");
  std::vector<std::size_t> dims(rank);
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = read_be32(bytes, 4 + 4 * i);
    total *= dims[i];
  }
  std::size_t expected = 4 + 4 * rank + total;
  if (bytes.size() != expected) {
    throw Error(ErrorKind::Data, what + ": IDX payload has " + std::to_string(bytes.size()) + " bytes, header implies " +
                                     std::to_string(expected) + (bytes.size() < expected ? " (truncated)" : ""));
  }
  return dims;
}

}  // namespace

Shape Dataset::sample_shape() const {
  return Shape(images.shape().begin() + (images.rank() ? 1 : 0), images.shape().end());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.images = images.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  out.name = name;
  out.split = split;
  out.num_classes = num_classes;
  return out;
}

void validate_dataset(const Dataset& d) {
  if (d.images.rank() != 4) throw Error(ErrorKind::Data, d.name + ": images must be (N, H, W, C)");
  if (d.images.dim(0) != d.labels.size()) {
    throw Error(ErrorKind::Data, d.name + ": " + std::to_string(d.images.dim(0)) + " images but " +
                                     std::to_string(d.labels.size()) + " labels");
  }
  for (float v : d.images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error(ErrorKind::Data, d.name + ": pixel value outside [0, 1]");
  }
  for (int y : d.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= d.num_classes) {
      throw Error(ErrorKind::Data, d.name + ": label " + std::to_string(y) + " outside [0, " +
                                       std::to_string(d.num_classes) + ")");
    }
  }
}

Dataset read_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         const std::string& name, Split split) {
  std::string img = read_data_file(images);
  std::string lab = read_data_file(labels);
  auto idims = idx_header(img, 0x00000803, images.filename().string());
  auto ldims = idx_header(lab, 0x00000801, labels.filename().string());
  if (idims[0] != ldims[0]) {
    throw Error(ErrorKind::Data, name + ": " + std::to_string(idims[0]) + " images but " + std::to_string(ldims[0]) +
                                     " labels");
  }
  Dataset d;
  d.name = name;
  d.split = split;
  d.images = Tensor({idims[0], idims[1], idims[2], 1});
  const std::size_t offset = 16;
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    d.images[i] = static_cast<float>(static_cast<unsigned char>(img[offset + i])) / 255.0f;
  }
  d.labels.resize(ldims[0]);
  for (std::size_t i = 0; i < ldims[0]; ++i) d.labels[i] = static_cast<unsigned char>(lab[8 + i]);
  validate_dataset(d);
  return d;
}

DatasetPair load_mnist(const std::filesystem::path& dir) {
  return {read_idx_dataset(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", "mnist", Split::Train),
          read_idx_dataset(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", "mnist", Split::Test)};
}

Dataset read_cifar_batches(const std::vector<std::filesystem::path>& files, const std::string& name, Split split) {
  std::vector<std::string> blobs;
  std::size_t records = 0;
  for (const auto& f : files) {
    blobs.push_back(read_data_file(f));
    if (blobs.back().size() % kCifarRecordBytes != 0) {
      throw Error(ErrorKind::Data, f.filename().string() + ": size " + std::to_string(blobs.back().size()) +
                                       " is not a multiple of the 3073-byte record length");
    }
    records += blobs.back().size() / kCifarRecordBytes;
  }
  Dataset d;
  d.name = name;
  d.split = split;
  d.images = Tensor({records, 32, 32, 3});
  d.labels.resize(records);
  std::size_t r = 0;
  for (const auto& blob : blobs) {
    for (std::size_t off = 0; off < blob.size(); off += kCifarRecordBytes, ++r) {
      d.labels[r] = static_cast<unsigned char>(blob[off]);
      float* out = d.images.data() + r * 3072;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 1024; ++p)
          out[p * 3 + c] = static_cast<float>(static_cast<unsigned char>(blob[off + 1 + c * 1024 + p])) / 255.0f;
    }
  }
  validate_dataset(d);
  return d;
}

DatasetPair load_cifar10(const std::filesystem::path& dir) {
  std::filesystem::path root = dir;
  if (!std::filesystem::exists(root / "test_batch.bin") && std::filesystem::exists(dir / "cifar-10-batches-bin")) {
    root = dir / "cifar-10-batches-bin";
  }
  std::vector<std::filesystem::path> train;
  for (int i = 1; i <= 5; ++i) train.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  return {read_cifar_batches(train, "cifar10", Split::Train),
          read_cifar_batches({root / "test_batch.bin"}, "cifar10", Split::Test)};
}

DatasetPair make_toy_dataset(std::uint64_t seed, const ToyOptions& options) {
  auto make = [&](std::size_t n, std::uint64_t stream, Split split) {
    Rng rng(mix_seed(seed, stream));
    Dataset d;
    d.name = "toy";
    d.split = split;
    d.num_classes = 4;
    d.images = Tensor({n, 8, 8, 1});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % 4);
    rng.shuffle(std::span<int>(d.labels));
    for (std::size_t i = 0; i < n; ++i) {
      int c = d.labels[i];
      std::size_t qr = static_cast<std::size_t>(c / 2) * 4, qc = static_cast<std::size_t>(c % 2) * 4;
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t col = 0; col < 8; ++col) {
          bool lit = r >= qr && r < qr + 4 && col >= qc && col < qc + 4;
          double v = (lit ? options.high : options.low) + options.noise * rng.normal();
          d.images[i * 64 + r * 8 + col] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
    }
    return d;
  };
  return {make(options.train_size, 0, Split::Train), make(options.test_size, 1, Split::Test)};
}

BatchStream::BatchStream(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed)
    : dataset_(&dataset), batch_size_(batch_size), order_(dataset.size()) {
  if (batch_size == 0) throw ConfigError({"batch size must be >= 1"});
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order_));
}

std::size_t BatchStream::batch_count() const noexcept { return (order_.size() + batch_size_ - 1) / batch_size_; }

bool BatchStream::next(Batch& batch) {
  if (cursor_ >= order_.size()) return false;
  std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  batch.indices.assign(order_.begin() + static_cast<long>(cursor_), order_.begin() + static_cast<long>(end));
  batch.images = dataset_->images.gather_rows(batch.indices);
  batch.labels.clear();
  for (std::size_t i : batch.indices) batch.labels.push_back(dataset_->labels[i]);
  cursor_ = end;
  return true;
}

std::filesystem::path data_root() {
  if (const char* env = std::getenv("TARGETFORGE_DATA_DIR"); env && *env) return env;
  return "data";
}

void save_adversarial(const std::filesystem::path& path, const AdvBatch& batch, const nlohmann::json& metadata) {
  Container c;
  c.metadata = {{"info", metadata},
                {"labels", batch.labels},
                {"source_indices", batch.source_indices},
                {"success", batch.success},
                {"converged", batch.converged},
                {"iterations", batch.iterations}};
  c.tensors.push_back({"adversarial", batch.adversarial});
  c.tensors.push_back({"l2", Tensor({batch.l2.size()}, batch.l2)});
  c.tensors.push_back({"linf", Tensor({batch.linf.size()}, batch.linf)});
  write_container(path, kAdversarialMagic, c);
}

AdvBatch load_adversarial(const std::filesystem::path& path, nlohmann::json* metadata) {
  Container c = read_container(path, kAdversarialMagic);
  AdvBatch b;
  try {
    b.labels = c.metadata.at("labels").get<std::vector<int>>();
    b.source_indices = c.metadata.at("source_indices").get<std::vector<std::size_t>>();
    b.success = c.metadata.at("success").get<std::vector<std::uint8_t>>();
    b.converged = c.metadata.at("converged").get<std::vector<std::uint8_t>>();
    b.iterations = c.metadata.at("iterations").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed adversarial file metadata: ") + e.what());
  }
  b.adversarial = c.tensor("adversarial");
  auto l2 = c.tensor("l2").values();
  auto linf = c.tensor("linf").values();
  b.l2.assign(l2.begin(), l2.end());
  b.linf.assign(linf.begin(), linf.end());
  if (b.adversarial.rank() == 0 || b.adversarial.dim(0) != b.labels.size() || b.l2.size() != b.labels.size()) {
    throw Error(ErrorKind::Format, "adversarial file sample counts disagree");
  }
  if (metadata) *metadata = c.metadata.value("info", nlohmann::json::object());
  return b;
}

}  // namespace targetforge
