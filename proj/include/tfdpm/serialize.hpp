#pragma once

#include "tfdpm/common.hpp"

#include <cstring>
#include <string>
#include <vector>

namespace tfdpm::io {

/// FNV-1a over a byte string; checkpoint payloads are hashed with this.
inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

class Writer {
public:
    void u64(std::uint64_t v) {
        char b[8];
        std::memcpy(b, &v, 8);
        buf_.append(b, 8);
    }
    void f64(double v) {
        char b[8];
        std::memcpy(b, &v, 8);
        buf_.append(b, 8);
    }
    void str(const std::string& s) {
        u64(s.size());
        buf_.append(s);
    }
    void matrix(const Matrix& m) {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        buf_.append(reinterpret_cast<const char*>(m.data()),
                    static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

    std::uint64_t u64() {
        need(8);
        std::uint64_t v;
        std::memcpy(&v, buf_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }
    double f64() {
        need(8);
        double v;
        std::memcpy(&v, buf_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    Matrix matrix() {
        const auto rows = static_cast<Eigen::Index>(u64());
        const auto cols = static_cast<Eigen::Index>(u64());
        if (rows < 0 || cols < 0 || rows * cols > (1LL << 30))
            throw CheckpointError("corrupt matrix header in checkpoint");
        Matrix m(rows, cols);
        const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
        need(n);
        std::memcpy(m.data(), buf_.data() + pos_, n);
        pos_ += n;
        return m;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::uint64_t n) {
        if (pos_ + n > buf_.size()) throw CheckpointError("truncated checkpoint payload");
    }
    std::string buf_;
    std::size_t pos_ = 0;
};

}  // namespace tfdpm::io
