#pragma once

// Little-endian fixed-width binary helpers shared by the artifact formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "analogon/errors.hpp"

namespace analogon::binio {

template <typename T>
  requires std::is_arithmetic_v<T>
void put(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
  requires std::is_arithmetic_v<T>
T get(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw IoError("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t max_len = 1u << 24) {
  const auto n = get<std::uint32_t>(is);
  if (n > max_len) throw IoError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("unexpected end of file");
  return s;
}

inline void put_magic(std::ostream& os, const char (&magic)[9]) { os.write(magic, 8); }

inline void expect_magic(std::istream& is, const char (&magic)[9], const std::string& what) {
  char buf[8];
  if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) throw IoError("not a " + what + " file");
}

}  // namespace analogon::binio
