// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian byte packing shared by the DPFT and DPCK codecs.

#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dpdiff/errors.hpp"

namespace dpdiff::bytes {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), data.data(), static_cast<uInt>(data.size())));
}

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    buffer_.insert(buffer_.end(), raw.begin(), raw.end());
  }

  void put_bytes(std::span<const std::uint8_t> data) { buffer_.insert(buffer_.end(), data.begin(), data.end()); }
  void put_string(const std::string& s) { buffer_.insert(buffer_.end(), s.begin(), s.end()); }

  std::size_t size() const { return buffer_.size(); }
  std::vector<std::uint8_t>& buffer() { return buffer_; }

 private:
  std::vector<std::uint8_t> buffer_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename T>
  T get(const char* what) {
    require(sizeof(T), what);
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(raw);
  }

  std::span<const std::uint8_t> get_bytes(std::size_t n, const char* what) {
    require(n, what);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void require(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw IoError(std::string("truncated payload reading ") + what + " at byte offset " + std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace dpdiff::bytes
