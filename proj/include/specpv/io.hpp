// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian binary encoding shared by the checkpoint and cache-dump
// formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "specpv/numerics.hpp"

namespace specpv::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void bytes(const void* data, std::size_t n) {
    os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!os_) {
      throw std::runtime_error("write failed");
    }
  }

  template <typename T>
  void uint(T value) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
    }
    bytes(buf, sizeof(T));
  }

  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void i32(std::int32_t v) { uint(static_cast<std::uint32_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

  /// name length u16, UTF-8 name, rows u32, cols u32, rows*cols f32 payload.
  void tensor(const std::string& name, const Tensor2D& t) {
    if (name.size() > 0xFFFF) {
      throw std::invalid_argument("tensor name too long");
    }
    u16(static_cast<std::uint16_t>(name.size()));
    bytes(name.data(), name.size());
    u32(static_cast<std::uint32_t>(t.rows));
    u32(static_cast<std::uint32_t>(t.cols));
    if constexpr (std::endian::native == std::endian::little) {
      bytes(t.data.data(), t.data.size() * sizeof(float));
    } else {
      for (float v : t.data) f32(v);
    }
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  /// Sets the label used in truncation errors.
  void context(std::string what) { context_ = std::move(what); }

  void bytes(void* out, std::size_t n) {
    is_.read(static_cast<char*>(out), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError("truncated file while reading " + context_);
    }
  }

  template <typename T>
  T uint() {
    unsigned char buf[sizeof(T)];
    bytes(buf, sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    }
    return static_cast<T>(v);
  }

  std::uint16_t u16() { return uint<std::uint16_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(uint<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }

  std::string name() {
    context("tensor name");
    const auto len = u16();
    std::string s(len, '\0');
    bytes(s.data(), len);
    return s;
  }

  /// Reads the shape and payload following an already-read name.
  Tensor2D tensor_body(const std::string& name) {
    context("tensor '" + name + "'");
    const auto rows = u32();
    const auto cols = u32();
    Tensor2D t(rows, cols);
    if constexpr (std::endian::native == std::endian::little) {
      bytes(t.data.data(), t.data.size() * sizeof(float));
    } else {
      for (auto& v : t.data) v = f32();
    }
    return t;
  }

 private:
  std::istream& is_;
  std::string context_ = "header";
};

}  // namespace specpv::io
