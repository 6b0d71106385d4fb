#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "udaforge/errors.hpp"

namespace udaforge {

// Little-endian byte stream primitives shared by the WGT1 and RST1 formats.
// Everything goes through explicit shifts so files are byte-identical on any
// host, and the reader reports the offset of the first bad byte.

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) {
        buf_.push_back(static_cast<std::uint8_t>(v & 0xFF));
        buf_.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    }
    void u32(std::uint32_t v) {
        for (int s = 0; s < 32; s += 8) buf_.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
    }
    void u64(std::uint64_t v) {
        for (int s = 0; s < 64; s += 8) buf_.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }

    const std::vector<std::uint8_t>& data() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8() { return take(1)[0]; }
    std::uint16_t u16() {
        const auto* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint32_t u32() {
        const auto* p = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }
    std::uint64_t u64() {
        const auto* p = take(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        const auto* p = take(n);
        return {reinterpret_cast<const char*>(p), n};
    }

    std::size_t offset() const { return pos_; }
    bool exhausted() const { return pos_ == data_.size(); }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(what + " at offset " + std::to_string(pos_));
    }

private:
    const std::uint8_t* take(std::size_t n) {
        if (pos_ + n > data_.size())
            throw FormatError("truncated input: need " + std::to_string(n) + " bytes at offset " +
                              std::to_string(pos_));
        const auto* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// 64-bit FNV-1a over a byte stream.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
    for (std::uint8_t b : bytes) {
        hash ^= b;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace udaforge
