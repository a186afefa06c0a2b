#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbvr/tensor.hpp"

namespace mbvr {

// Parse failure with the byte offset where decoding stopped.
struct ParseError : std::runtime_error {
    ParseError(const std::string& what, std::size_t off)
        : std::runtime_error(what + " (at byte offset " + std::to_string(off) + ")"),
          offset(off) {}
    std::size_t offset;
};

// Little-endian binary encoder. Doubles are written bit-for-bit so files
// round-trip exactly.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }

    void bytes(const void* p, std::size_t n) {
        buf_.append(static_cast<const char*>(p), n);
    }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) u64(d);
        for (std::size_t i = 0; i < t.numel(); ++i) f64(t[i]);
    }

    const std::string& buffer() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == data_.size(); }

    std::uint8_t u8() {
        need(1, "u8");
        return static_cast<std::uint8_t>(data_[pos_++]);
    }

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string str() {
        std::uint32_t n = u32();
        need(n, "string body");
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    Tensor tensor() {
        std::uint32_t rank = u32();
        if (rank > 8) throw ParseError("tensor rank implausibly large", pos_ - 4);
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(u64());
            numel *= d;
        }
        if (numel > data_.size()) throw ParseError("tensor larger than file", pos_);
        std::vector<double> data(numel);
        for (auto& v : data) v = f64();
        return Tensor(std::move(shape), std::move(data));
    }

    void expect_magic(const char magic[4], const std::string& what) {
        need(4, what + " magic");
        if (std::memcmp(data_.data() + pos_, magic, 4) != 0) {
            throw ParseError("bad " + what + " magic", pos_);
        }
        pos_ += 4;
    }

    void fail(const std::string& what) const { throw ParseError(what, pos_); }

private:
    void need(std::size_t n, const std::string& what) const {
        if (pos_ + n > data_.size()) {
            throw ParseError("truncated input reading " + what, pos_);
        }
    }

    std::string data_;
    std::size_t pos_ = 0;
};

void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

} // namespace mbvr
