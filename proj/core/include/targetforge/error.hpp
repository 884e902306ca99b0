#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace targetforge {

enum class ErrorKind {
  Shape,
  Format,    // corrupt or incompatible file contents
  Config,    // invalid user-supplied configuration
  Data,      // missing or malformed dataset files
  Numeric,   // non-finite values where finite ones are required
  State,     // API misuse, e.g. backward without a matching forward
  Io,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when a tensor does not fit the layer it is fed to.
class ShapeError : public Error {
 public:
  ShapeError(long layer_index, std::vector<std::size_t> expected,
             std::vector<std::size_t> actual, const std::string& detail);

  long layer_index() const noexcept { return layer_index_; }
  const std::vector<std::size_t>& expected() const noexcept { return expected_; }
  const std::vector<std::size_t>& actual() const noexcept { return actual_; }

 private:
  long layer_index_;
  std::vector<std::size_t> expected_;
  std::vector<std::size_t> actual_;
};

/// Carries every validation problem found in one pass.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems);

  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

std::string format_shape(const std::vector<std::size_t>& shape);

}  // namespace targetforge
