// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace cpolab {

// 64-bit FNV-1a; used for deterministic record splits.
constexpr std::uint64_t fnv1a64(std::string_view text, std::uint64_t h = 1469598103934665603ULL) noexcept {
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

// Lowercase hex SHA-256 of the bytes.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

} // namespace cpolab
