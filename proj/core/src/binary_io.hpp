#pragma once

// Little-endian encoding helpers for the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <iterator>
#include <ostream>
#include <string>
#include <string_view>

#include <zlib.h>

#include "qac/errors.hpp"

namespace qac::detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void i64(std::int64_t v) { put(static_cast<std::uint64_t>(v), 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::string_view s) { buf_.append(s); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }

    // Appends crc32 of the buffer so far.
    void seal() {
        u32(static_cast<std::uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size()))));
    }

    const std::string& data() const { return buf_; }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }

    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    std::int64_t i64() { return static_cast<std::int64_t>(get(8)); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string_view bytes(std::size_t n) { return take(n); }
    std::string str() { return std::string(take(u32())); }

    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::string_view take(std::size_t n) {
        if (n > remaining()) throw FormatError("unexpected end of data");
        auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::uint64_t get(int n) {
        const auto raw = take(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = n - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(raw[static_cast<std::size_t>(i)]);
        return v;
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_all(std::istream& in) {
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Verifies and strips the crc32 trailer.
inline std::string_view unseal(std::string_view data) {
    if (data.size() < 4) throw ChecksumError("file too short for checksum trailer");
    const auto body = data.substr(0, data.size() - 4);
    ByteReader trailer(data.substr(data.size() - 4));
    const auto stored = trailer.u32();
    const auto actual = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    if (stored != actual) throw ChecksumError("checksum mismatch (truncated or corrupted file)");
    return body;
}

}  // namespace qac::detail
