#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "hadamrnn/error.hpp"

namespace hadamrnn::io {

/// Little-endian byte sink.
class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    if constexpr (std::is_floating_point_v<T>) {
      static_assert(sizeof(T) == 8, "only 64-bit floats are serialized");
      put(std::bit_cast<std::uint64_t>(value));
    } else {
      using U = std::make_unsigned_t<T>;
      auto u = static_cast<U>(value);
      for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes_.push_back(static_cast<std::uint8_t>(u & 0xFFu));
        if constexpr (sizeof(T) > 1) u = static_cast<U>(u >> 8);
      }
    }
  }

  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_tag(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

  /// u64 length then the elements.
  template <typename T>
  void put_array(std::span<const T> values) {
    put(static_cast<std::uint64_t>(values.size()));
    for (const T& v : values) put(v);
  }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    if constexpr (std::is_floating_point_v<T>) {
      static_assert(sizeof(T) == 8, "only 64-bit floats are serialized");
      return std::bit_cast<double>(get<std::uint64_t>());
    } else {
      using U = std::make_unsigned_t<T>;
      need(sizeof(T));
      U u = 0;
      for (std::size_t i = 0; i < sizeof(T); ++i)
        u = static_cast<U>(u | (static_cast<U>(bytes_[pos_ + i]) << (8 * i)));
      pos_ += sizeof(T);
      return static_cast<T>(u);
    }
  }

  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_tag(std::string_view tag, const char* what) {
    auto b = get_bytes(tag.size());
    detail::require(std::memcmp(b.data(), tag.data(), tag.size()) == 0, ErrorKind::data,
                    std::string(what) + ": bad magic");
  }

  template <typename T>
  std::vector<T> get_array(std::uint64_t max_len = std::uint64_t{1} << 40) {
    const auto n = get<std::uint64_t>();
    detail::require(n <= max_len && n <= remaining() && n * sizeof(T) <= remaining(), ErrorKind::data,
                    "array length exceeds payload");
    std::vector<T> out(static_cast<std::size_t>(n));
    for (auto& v : out) v = get<T>();
    return out;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    detail::require(n <= bytes_.size() - pos_, ErrorKind::data, "unexpected end of data");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  detail::require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  detail::require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  detail::require(static_cast<bool>(out), ErrorKind::io, "write failed: " + path);
}

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace hadamrnn::io
