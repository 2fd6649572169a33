#pragma once

// Little-endian primitives shared by the checkpoint and optimizer-state files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "cafcn/errors.hpp"

namespace cafcn::detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

inline void put_f64(std::ostream& os, double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}

    void expect_magic(const std::string& magic) {
        std::string got(magic.size(), '\0');
        read(got.data(), got.size());
        if (got != magic) throw FormatError("bad magic, expected " + magic, 0);
    }

    std::uint32_t u32() {
        unsigned char b[4];
        read(reinterpret_cast<char*>(b), 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    double f64() {
        unsigned char b[8];
        read(reinterpret_cast<char*>(b), 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return std::bit_cast<double>(v);
    }

    std::size_t offset() const { return offset_; }

    void expect_end() {
        if (is_.peek() != std::char_traits<char>::eof()) {
            throw FormatError("trailing bytes after payload", offset_);
        }
    }

private:
    void read(char* dst, std::size_t n) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw FormatError("truncated file", offset_ + static_cast<std::size_t>(is_.gcount()));
        }
        offset_ += n;
    }

    std::istream& is_;
    std::size_t offset_ = 0;
};

}  // namespace cafcn::detail
