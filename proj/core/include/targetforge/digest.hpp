#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace targetforge {

std::string sha256_hex(std::string_view bytes);
std::string md5_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace targetforge
