#include "targetforge/error.hpp"

#include <sstream>

namespace targetforge {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Format: return "format";
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::State: return "state";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

std::string format_shape(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

namespace {

std::string shape_message(long layer_index, const std::vector<std::size_t>& expected,
                          const std::vector<std::size_t>& actual, const std::string& detail) {
  std::ostringstream out;
  out << "layer " << layer_index << ": " << detail << " (expected " << format_shape(expected)
      << ", got " << format_shape(actual) << ")";
  return out.str();
}

std::string join_problems(const std::vector<std::string>& problems) {
  std::ostringstream out;
  out << problems.size() << " configuration problem" << (problems.size() == 1 ? "" : "s");
  for (const auto& p : problems) out << "\n  - " << p;
  return out.str();
}

}  // namespace

ShapeError::ShapeError(long layer_index, std::vector<std::size_t> expected,
                       std::vector<std::size_t> actual, const std::string& detail)
    : Error(ErrorKind::Shape, shape_message(layer_index, expected, actual, detail)),
      layer_index_(layer_index),
      expected_(std::move(expected)),
      actual_(std::move(actual)) {}

ConfigError::ConfigError(std::vector<std::string> problems)
    : Error(ErrorKind::Config, join_problems(problems)), problems_(std::move(problems)) {}

}  // namespace targetforge
