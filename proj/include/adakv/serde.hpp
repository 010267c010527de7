// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <system_error>

namespace adakv {

/// Malformed or unsupported on-disk content.
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Underlying I/O failure (open, read, write).
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace serde {

inline void store_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void store_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void store_f64(std::ostream& os, double v) {
    store_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t load_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t load_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("unexpected end of file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double load_f64(std::istream& is) { return std::bit_cast<double>(load_u64(is)); }

/// FNV-1a 64-bit, streamable: feed bytes through `update`, read `value`.
class Fnv1a64 {
  public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ull;
        }
    }
    void update_f64(double v) {
        const auto u = std::bit_cast<std::uint64_t>(v);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
        update(b, 8);
    }
    void update_u64(std::uint64_t u) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
        update(b, 8);
    }
    std::uint64_t value() const { return state_; }

  private:
    std::uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

/// Scientific notation with 17 significant digits: enough to round-trip
/// any double, so identical values always give identical report bytes.
inline std::string to_chars17(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::scientific, 16);
    if (res.ec != std::errc{}) throw std::runtime_error("to_chars17: conversion failed");
    return std::string(buf, res.ptr);
}

}  // namespace serde
}  // namespace adakv
