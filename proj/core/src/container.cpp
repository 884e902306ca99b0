#include "targetforge/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "targetforge/error.hpp"

namespace targetforge {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    T value;
    std::memcpy(&value, take(sizeof(T), what).data(), sizeof(T));
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorKind::Format, std::string("truncated container while reading ") + what);
    }
    std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Container::tensor(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw Error(ErrorKind::Format, "container has no tensor named '" + std::string(name) + "'");
}

std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

std::string encode_container(std::string_view magic, const Container& container) {
  nlohmann::json meta = container.metadata;
  nlohmann::json listing = nlohmann::json::array();
  for (const auto& t : container.tensors) listing.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  meta["tensors"] = listing;
  std::string text = canonical_json(meta);

  std::string out(magic);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& t : container.tensors) {
    put<std::uint64_t>(out, t.tensor.size());
    out.append(reinterpret_cast<const char*>(t.tensor.data()), t.tensor.size() * sizeof(float));
  }
  return out;
}

Container decode_container(std::string_view bytes, std::string_view magic) {
  Reader in(bytes);
  if (bytes.size() < magic.size() || in.take(magic.size(), "magic") != magic) {
    throw Error(ErrorKind::Format, "bad magic bytes: not a '" + std::string(magic) + "' file");
  }
  auto version = in.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw Error(ErrorKind::Format, "unsupported container version " + std::to_string(version) + " (expected " +
                                       std::to_string(kContainerVersion) + ")");
  }
  auto meta_len = in.get<std::uint64_t>("metadata length");
  Container out;
  try {
    out.metadata = nlohmann::json::parse(in.take(meta_len, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Format, std::string("corrupt container metadata: ") + e.what());
  }
  if (!out.metadata.is_object() || !out.metadata.contains("tensors") || !out.metadata["tensors"].is_array()) {
    throw Error(ErrorKind::Format, "container metadata lacks a tensor listing");
  }
  for (const auto& entry : out.metadata["tensors"]) {
    std::string name;
    Shape shape;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, std::string("malformed tensor listing: ") + e.what());
    }
    auto count = in.get<std::uint64_t>("tensor element count");
    if (count != shape_size(shape)) {
      throw Error(ErrorKind::Format, "tensor '" + name + "' stores " + std::to_string(count) +
                                         " elements but header shape " + format_shape(shape) + " needs " +
                                         std::to_string(shape_size(shape)));
    }
    if (count > in.remaining() / sizeof(float)) {
      throw Error(ErrorKind::Format, "truncated payload for tensor '" + name + "'");
    }
    std::string_view raw = in.take(count * sizeof(float), "tensor payload");
    std::vector<float> data(count);
    std::memcpy(data.data(), raw.data(), raw.size());
    out.tensors.push_back({name, Tensor(shape, std::move(data))});
  }
  if (in.remaining() != 0) {
    throw Error(ErrorKind::Format, std::to_string(in.remaining()) + " trailing bytes after last tensor");
  }
  out.metadata.erase("tensors");
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& container) {
  write_file_atomic(path, encode_container(magic, container));
}

Container read_container(const std::filesystem::path& path, std::string_view magic) {
  return decode_container(read_file(path), magic);
}

}  // namespace targetforge
