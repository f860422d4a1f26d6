#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace masktok::detail {

static_assert(std::endian::native == std::endian::little,
              "binary file formats assume a little-endian host");

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of file while reading binary record");
  return v;
}

inline void write_bytes(std::ostream& os, const std::string& s) {
  write_raw<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_bytes(std::istream& is) {
  const auto n = read_raw<std::uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("unexpected end of file while reading binary record");
  return s;
}

}  // namespace masktok::detail
