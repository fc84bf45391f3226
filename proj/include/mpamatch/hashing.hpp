#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace mpamatch {

std::array<unsigned char, 32> sha256(std::string_view bytes);
std::string sha256_hex(std::string_view bytes);
/// Hex digest of a file's bytes; throws DataError when unreadable.
std::string sha256_file(const std::filesystem::path& path);
/// First eight digest bytes, little-endian.
std::uint64_t sha256_u64(std::string_view bytes);

}  // namespace mpamatch
