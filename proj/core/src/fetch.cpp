#include <curl/curl.h>
#include <zlib.h>

#include <filesystem>
#include <cstring>
#include <memory>
#include <mutex>

#include "targetforge/container.hpp"
#include "targetforge/data.hpp"
#include "targetforge/digest.hpp"
#include "targetforge/error.hpp"

namespace targetforge {

namespace {

struct Archive {
  const char* file;
  const char* md5;
};

constexpr const char* kMnistMirror = "https://ossci-datasets.s3.amazonaws.com/mnist/";
constexpr Archive kMnistFiles[] = {
    {"train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"},
    {"train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcc0a7aee2b"},
    {"t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"},
    {"t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"},
};
constexpr const char* kCifarMirror = "https://www.cs.toronto.edu/~kriz/";
constexpr Archive kCifarArchive = {"cifar-10-binary.tar.gz", "c32a1d4ab5d03f1284b67883e8d87530"};

std::size_t append_body(char* data, std::size_t size, std::size_t count, void* user) {
  static_cast<std::string*>(user)->append(data, size * count);
  return size * count;
}

std::string download(const std::string& url) {
  static std::once_flag init;
  std::call_once(init, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
  std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> curl(curl_easy_init(), &curl_easy_cleanup);
  if (!curl) throw Error(ErrorKind::Io, "cannot initialize libcurl");
  std::string body;
  curl_easy_setopt(curl.get(), CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl.get(), CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEFUNCTION, append_body);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEDATA, &body);
  CURLcode rc = curl_easy_perform(curl.get());
  if (rc != CURLE_OK) throw Error(ErrorKind::Data, "download of " + url + " failed: " + curl_easy_strerror(rc));
  return body;
}

std::string gunzip(const std::string& compressed, const std::string& what) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw Error(ErrorKind::Data, "zlib init failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(compressed.data()));
  zs.avail_in = static_cast<uInt>(compressed.size());
  std::string out;
  char buf[1 << 16];
  int rc;
  do {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof buf;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw Error(ErrorKind::Data, what + ": corrupt gzip stream");
    }
    out.append(buf, sizeof buf - zs.avail_out);
  } while (rc != Z_STREAM_END);
  inflateEnd(&zs);
  return out;
}

// Minimal ustar reader: regular files only.
std::vector<std::pair<std::string, std::string>> untar(const std::string& tar) {
  std::vector<std::pair<std::string, std::string>> files;
  std::size_t off = 0;
  while (off + 512 <= tar.size()) {
    const char* h = tar.data() + off;
    if (h[0] == '\0') break;
    std::string name(h, strnlen(h, 100));
    std::size_t size = std::stoul(std::string(h + 124, strnlen(h + 124, 12)), nullptr, 8);
    char type = h[156];
    off += 512;
    if (off + size > tar.size()) throw Error(ErrorKind::Data, "truncated tar entry " + name);
    if (type == '0' || type == '\0') files.emplace_back(name, tar.substr(off, size));
    off += (size + 511) / 512 * 512;
  }
  return files;
}

std::string fetch_verified(const std::string& base, const Archive& a, std::vector<FetchedFile>& report) {
  std::string url = base + a.file;
  std::string body = download(url);
  std::string md5 = md5_hex(body);
  if (md5 != a.md5) {
    throw Error(ErrorKind::Data, std::string(a.file) + ": checksum mismatch (md5 " + md5 + ", expected " + a.md5 + ")");
  }
  report.push_back({a.file, url, md5, sha256_hex(body), body.size()});
  return body;
}

}  // namespace

std::vector<FetchedFile> fetch_dataset(const std::string& name, const std::filesystem::path& dir,
                                       const std::string& mirror) {
  std::filesystem::create_directories(dir);
  std::vector<FetchedFile> report;
  if (name == "mnist") {
    std::string base = mirror.empty() ? kMnistMirror : mirror;
    for (const Archive& a : kMnistFiles) {
      std::string raw = gunzip(fetch_verified(base, a, report), a.file);
      std::string out = a.file;
      out.resize(out.size() - 3);
      write_file_atomic(dir / out, raw);
    }
  } else if (name == "cifar10") {
    std::string base = mirror.empty() ? kCifarMirror : mirror;
    std::string tar = gunzip(fetch_verified(base, kCifarArchive, report), kCifarArchive.file);
    std::size_t written = 0;
    for (const auto& [path, contents] : untar(tar)) {
      std::string file = std::filesystem::path(path).filename().string();
      if (file.size() > 4 && file.substr(file.size() - 4) == ".bin") {
        write_file_atomic(dir / file, contents);
        ++written;
      }
    }
    if (written < 6) throw Error(ErrorKind::Data, "CIFAR-10 archive did not contain the six binary batches");
  } else {
    throw ConfigError({"unknown dataset '" + name + "' (expected mnist or cifar10)"});
  }
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& f : report) {
    manifest.push_back({{"file", f.name}, {"url", f.url}, {"md5", f.md5}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  }
  write_file_atomic(dir / "fetch-manifest.json", manifest.dump(2) + "\n");
  return report;
}

}  // namespace targetforge
