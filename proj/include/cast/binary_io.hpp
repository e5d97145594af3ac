#pragma once

#include "cast/core.hpp"
#include "cast/hashing.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace cast {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Appends little-endian fields to a byte buffer.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void text(std::string_view s) { bytes(s.data(), s.size()); }
  template <class T>
  void put(T v) {
    bytes(&v, sizeof(T));
  }
  /// Appends the CRC32 of everything written so far.
  void seal() { put<std::uint32_t>(crc32(buf_)); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void save(const std::string& path) const { write_file(path, buf_); }

  static void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
  }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Reads little-endian fields, reporting the byte offset of any failure.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> buf, std::string what) : buf_(std::move(buf)), what_(std::move(what)) {}

  static std::vector<std::uint8_t> load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t offset) const {
    throw FormatError(what_ + ": " + msg + " at offset " + std::to_string(offset));
  }

  /// Checks the magic prefix and the trailing CRC32 over all preceding bytes.
  void open(std::string_view magic) {
    if (buf_.size() < magic.size() || std::memcmp(buf_.data(), magic.data(), magic.size()) != 0)
      fail("bad magic", 0);
    if (buf_.size() < magic.size() + 4) fail("truncated file", buf_.size());
    end_ = buf_.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, buf_.data() + end_, 4);
    const std::uint32_t actual = crc32(std::span<const std::uint8_t>(buf_.data(), end_));
    if (stored != actual) fail("CRC mismatch", end_);
    pos_ = magic.size();
  }

  void bytes(void* p, std::size_t n) {
    if (n > end_ - pos_) fail("truncated record", pos_);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string text(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::string what_;
  std::size_t pos_ = 0, end_ = 0;
};

}  // namespace cast
