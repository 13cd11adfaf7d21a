#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lateline/errors.hpp"

namespace lateline {

// Little-endian binary primitives shared by the feature, checkpoint and
// index file formats. Readers track the byte offset so format errors can
// point at the exact position.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open for write: " + path);
    }

    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { write_le(v); }
    void u32(std::uint32_t v) { write_le(v); }
    void u64(std::uint64_t v) { write_le(v); }
    void f32(float v) { std::uint32_t b; std::memcpy(&b, &v, 4); write_le(b); }
    void f64(double v) { std::uint64_t b; std::memcpy(&b, &v, 8); write_le(b); }

    void varint(std::uint64_t v) {
        while (v >= 0x80) {
            u8(static_cast<std::uint8_t>(v) | 0x80);
            v >>= 7;
        }
        u8(static_cast<std::uint8_t>(v));
    }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void close() {
        out_.close();
        if (!out_) throw IoError("write failed: " + path_);
    }

private:
    template <typename T>
    void write_le(T v) {
        unsigned char buf[sizeof(T)];
        for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(buf, sizeof(T));
    }

    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open for read: " + path);
        in_.seekg(0, std::ios::end);
        length_ = static_cast<std::uint64_t>(in_.tellg());
        in_.seekg(0, std::ios::beg);
    }

    std::uint64_t offset() const { return offset_; }
    std::uint64_t length() const { return length_; }
    const std::string& path() const { return path_; }

    void bytes(void* p, std::size_t n) {
        if (offset_ + n > length_) {
            throw FormatError(path_ + ": truncated at byte " + std::to_string(offset_) +
                              ", need " + std::to_string(n) + " more bytes but only " +
                              std::to_string(length_ - offset_) + " remain");
        }
        in_.read(static_cast<char*>(p), n);
        if (!in_) throw IoError("read failed: " + path_);
        offset_ += n;
    }

    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint16_t u16() { return read_le<std::uint16_t>(); }
    std::uint32_t u32() { return read_le<std::uint32_t>(); }
    std::uint64_t u64() { return read_le<std::uint64_t>(); }
    float f32() { std::uint32_t b = read_le<std::uint32_t>(); float v; std::memcpy(&v, &b, 4); return v; }
    double f64() { std::uint64_t b = read_le<std::uint64_t>(); double v; std::memcpy(&v, &b, 8); return v; }

    std::uint64_t varint() {
        std::uint64_t v = 0;
        int shift = 0;
        while (true) {
            const std::uint8_t b = u8();
            v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
            if (!(b & 0x80)) break;
            shift += 7;
            if (shift >= 64) throw FormatError(path_ + ": varint overflow at byte " + std::to_string(offset_));
        }
        return v;
    }

    std::string str(std::uint32_t max_len = 1u << 20) {
        const std::uint32_t n = u32();
        if (n > max_len) {
            throw FormatError(path_ + ": string length " + std::to_string(n) +
                              " exceeds limit at byte " + std::to_string(offset_ - 4));
        }
        std::string s(n, '\0');
        if (n > 0) bytes(s.data(), n);
        return s;
    }

    void expect_eof() const {
        if (offset_ != length_) {
            throw FormatError(path_ + ": " + std::to_string(length_ - offset_) +
                              " trailing bytes after offset " + std::to_string(offset_));
        }
    }

private:
    template <typename T>
    T read_le() {
        unsigned char buf[sizeof(T)];
        bytes(buf, sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
        return v;
    }

    std::string path_;
    std::ifstream in_;
    std::uint64_t offset_ = 0;
    std::uint64_t length_ = 0;
};

}  // namespace lateline
