// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level primitives for the on-disk formats. Everything is explicit
// little-endian so files move between machines; readers throw DataError
// with the format name on truncation instead of returning garbage.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "grasskit/core.hpp"

namespace grasskit {
namespace io {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(out, b, 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(out, b, 8);
}

inline void write_f32(std::ostream& out, float v) {
  write_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void write_f64(std::ostream& out, double v) {
  write_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void write_f32_array(std::ostream& out, const float* p, std::size_t n) {
  std::vector<unsigned char> buf(4 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t v = std::bit_cast<std::uint32_t>(p[i]);
    for (int j = 0; j < 4; ++j) {
      buf[4 * i + static_cast<std::size_t>(j)] =
          static_cast<unsigned char>(v >> (8 * j));
    }
  }
  if (!buf.empty()) write_bytes(out, buf.data(), buf.size());
}

inline void write_f64_array(std::ostream& out, const double* p, std::size_t n) {
  std::vector<unsigned char> buf(8 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t v = std::bit_cast<std::uint64_t>(p[i]);
    for (int j = 0; j < 8; ++j) {
      buf[8 * i + static_cast<std::size_t>(j)] =
          static_cast<unsigned char>(v >> (8 * j));
    }
  }
  if (!buf.empty()) write_bytes(out, buf.data(), buf.size());
}

inline void read_bytes(std::istream& in, void* p, std::size_t n, const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw DataError(what + " is truncated");
  }
}

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  read_bytes(in, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  read_bytes(in, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float read_f32(std::istream& in, const std::string& what) {
  return std::bit_cast<float>(read_u32(in, what));
}

inline double read_f64(std::istream& in, const std::string& what) {
  return std::bit_cast<double>(read_u64(in, what));
}

inline void read_f32_array(std::istream& in, float* p, std::size_t n,
                           const std::string& what) {
  std::vector<unsigned char> buf(4 * n);
  if (!buf.empty()) read_bytes(in, buf.data(), buf.size(), what);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t v = 0;
    for (int j = 0; j < 4; ++j) {
      v |= static_cast<std::uint32_t>(buf[4 * i + static_cast<std::size_t>(j)])
           << (8 * j);
    }
    p[i] = std::bit_cast<float>(v);
  }
}

inline void read_f64_array(std::istream& in, double* p, std::size_t n,
                           const std::string& what) {
  std::vector<unsigned char> buf(8 * n);
  if (!buf.empty()) read_bytes(in, buf.data(), buf.size(), what);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t v = 0;
    for (int j = 0; j < 8; ++j) {
      v |= static_cast<std::uint64_t>(buf[8 * i + static_cast<std::size_t>(j)])
           << (8 * j);
    }
    p[i] = std::bit_cast<double>(v);
  }
}

// Big-endian u32, for the IDX image and label formats.
inline std::uint32_t read_u32_be(std::istream& in, const std::string& what) {
  unsigned char b[4];
  read_bytes(in, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | b[i];
  return v;
}

inline void write_magic(std::ostream& out, const char tag[4]) {
  write_bytes(out, tag, 4);
}

// Throws "not a <what>" on a wrong tag and a truncation error on EOF, so
// feeding the wrong file type gives a direct message.
inline void expect_magic(std::istream& in, const char tag[4], const std::string& what) {
  char got[4];
  read_bytes(in, got, 4, what);
  if (std::memcmp(got, tag, 4) != 0) {
    throw DataError("not a " + what + " (bad magic)");
  }
}

// Trailing garbage after a complete record block means the file was not
// produced by this writer; refuse it rather than ignore it.
inline void expect_eof(std::istream& in, const std::string& what) {
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError(what + " has trailing bytes");
  }
}

}  // namespace io
}  // namespace grasskit
