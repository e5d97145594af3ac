#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace cast {

/// CRC-32 (IEEE, as used by zip/png); `crc` continues a running checksum.
std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc = 0);

/// Incremental SHA-256, lowercase hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::string& path);

/// 64-bit value as 16 lowercase hex digits.
std::string hex64(std::uint64_t v);

}  // namespace cast
