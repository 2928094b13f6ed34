#pragma once
// Little-endian primitives shared by the on-disk container formats.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace motok::binio {

inline void put_u8(std::ostream& os, uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void put_u16(std::ostream& os, uint16_t v) {
  put_u8(os, static_cast<uint8_t>(v & 0xff));
  put_u8(os, static_cast<uint8_t>(v >> 8));
}

inline void put_u32(std::ostream& os, uint32_t v) {
  put_u16(os, static_cast<uint16_t>(v & 0xffff));
  put_u16(os, static_cast<uint16_t>(v >> 16));
}

inline void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, static_cast<uint32_t>(v & 0xffffffffu));
  put_u32(os, static_cast<uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(os, bits);
}

[[noreturn]] inline void truncated(const char* what) {
  throw std::runtime_error(std::string("truncated stream while reading ") + what);
}

inline uint8_t get_u8(std::istream& is, const char* what) {
  int c = is.get();
  if (c == std::istream::traits_type::eof()) truncated(what);
  return static_cast<uint8_t>(c);
}

inline uint16_t get_u16(std::istream& is, const char* what) {
  uint16_t lo = get_u8(is, what);
  uint16_t hi = get_u8(is, what);
  return static_cast<uint16_t>(lo | (hi << 8));
}

inline uint32_t get_u32(std::istream& is, const char* what) {
  uint32_t lo = get_u16(is, what);
  uint32_t hi = get_u16(is, what);
  return lo | (hi << 16);
}

inline uint64_t get_u64(std::istream& is, const char* what) {
  uint64_t lo = get_u32(is, what);
  uint64_t hi = get_u32(is, what);
  return lo | (hi << 32);
}

inline float get_f32(std::istream& is, const char* what) {
  uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n) truncated(what);
}

}  // namespace motok::binio
