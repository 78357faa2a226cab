#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace dialign {

std::string sha256_hex(std::string_view data);

/// Digest of a file's bytes. Throws DataError when the file is unreadable.
std::string file_sha256(const std::filesystem::path& path);

/// First 8 bytes of the SHA-256 digest, big-endian.
std::uint64_t sha256_u64(std::string_view data);

}  // namespace dialign
