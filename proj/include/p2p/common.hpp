#pragma once

// Shared utilities: error helpers, deterministic RNG, hashing/CRC,
// little-endian binary IO, timing.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace p2p {

// ---------------------------------------------------------------------------
// error helpers

template <typename... Parts>
std::string strcat_msg(Parts&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    return os.str();
}

template <typename... Parts>
[[noreturn]] void fail(Parts&&... parts) {
    throw std::runtime_error(strcat_msg(std::forward<Parts>(parts)...));
}

template <typename... Parts>
[[noreturn]] void fail_invalid(Parts&&... parts) {
    throw std::invalid_argument(strcat_msg(std::forward<Parts>(parts)...));
}

template <typename... Parts>
void require(bool cond, Parts&&... parts) {
    if (!cond) fail_invalid(std::forward<Parts>(parts)...);
}

// ---------------------------------------------------------------------------
// deterministic RNG (xoshiro256** seeded via splitmix64)
//
// Self-contained so that seeded runs are reproducible independent of the
// standard library's distribution implementations.

class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : s_) {
            x += 0x9E3779B97F4A7C15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
            word = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n); n > 0
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) fail_invalid("Rng::uniform_int: n must be positive");
        // rejection sampling to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // standard normal via Box-Muller (no cached spare, to keep the
    // consumption pattern independent of call history)
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

// ---------------------------------------------------------------------------
// hashing

// FNV-1a 64-bit
inline uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xCBF29CE484222325ull) {
    uint64_t h = seed;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// CRC-32 (IEEE 802.3 polynomial, reflected)
class Crc32 {
public:
    void update(const void* data, size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        uint32_t c = state_;
        for (size_t i = 0; i < len; ++i) {
            c = table()[(c ^ p[i]) & 0xFF] ^ (c >> 8);
        }
        state_ = c;
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    uint32_t value() const { return state_ ^ 0xFFFFFFFFu; }

private:
    static const uint32_t* table() {
        static const auto t = [] {
            std::vector<uint32_t> v(256);
            for (uint32_t i = 0; i < 256; ++i) {
                uint32_t c = i;
                for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
                v[i] = c;
            }
            return v;
        }();
        return t.data();
    }
    uint32_t state_ = 0xFFFFFFFFu;
};

inline uint32_t crc32_of(std::string_view bytes) {
    Crc32 c;
    c.update(bytes);
    return c.value();
}

// ---------------------------------------------------------------------------
// little-endian binary IO for the checkpoint/adapter file formats

class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(uint32_t v) { raw_le(&v, 4); }
    void u64(uint64_t v) { raw_le(&v, 8); }
    void i32(int32_t v) { raw_le(&v, 4); }
    void f64(double v) { raw_le(&v, 8); }
    void f64_array(const double* p, size_t n) {
        for (size_t i = 0; i < n; ++i) f64(p[i]);
    }
    void str(std::string_view s) {
        u32(static_cast<uint32_t>(s.size()));
        buf_.append(s.data(), s.size());
    }
    void magic(std::string_view m) { buf_.append(m.data(), m.size()); }

    // appends CRC32 of everything written so far
    void finish_with_crc() {
        uint32_t c = crc32_of(buf_);
        u32(c);
    }

    const std::string& bytes() const { return buf_; }

private:
    void raw_le(const void* p, size_t n) {
        // assumes a little-endian host; asserted once at startup in io.cpp
        buf_.append(static_cast<const char*>(p), n);
    }
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string bytes, std::string origin = "<memory>")
        : buf_(std::move(bytes)), origin_(std::move(origin)) {}

    // strips and verifies the trailing CRC32
    void verify_trailing_crc() {
        if (buf_.size() < 4) fail(origin_, ": file truncated (no checksum)");
        uint32_t stored;
        std::memcpy(&stored, buf_.data() + buf_.size() - 4, 4);
        uint32_t actual = crc32_of(std::string_view(buf_).substr(0, buf_.size() - 4));
        if (stored != actual) fail(origin_, ": checksum mismatch (file corrupt or truncated)");
        buf_.resize(buf_.size() - 4);
    }

    void expect_magic(std::string_view m) {
        if (buf_.size() - pos_ < m.size() ||
            std::string_view(buf_).substr(pos_, m.size()) != m) {
            fail(origin_, ": bad magic, expected \"", m, "\"");
        }
        pos_ += m.size();
    }

    uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
    uint32_t u32() { uint32_t v; std::memcpy(&v, take(4), 4); return v; }
    uint64_t u64() { uint64_t v; std::memcpy(&v, take(8), 8); return v; }
    int32_t i32() { int32_t v; std::memcpy(&v, take(4), 4); return v; }
    double f64() { double v; std::memcpy(&v, take(8), 8); return v; }
    std::string str() {
        uint32_t n = u32();
        return std::string(take(n), n);
    }
    void f64_array(double* p, size_t n) {
        for (size_t i = 0; i < n; ++i) p[i] = f64();
    }

    size_t remaining() const { return buf_.size() - pos_; }

private:
    const char* take(size_t n) {
        if (buf_.size() - pos_ < n) fail(origin_, ": file truncated");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::string buf_;
    std::string origin_;
    size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);
uint32_t file_crc32(const std::string& path);

// ---------------------------------------------------------------------------
// timing

class StopWatch {
public:
    StopWatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    void reset() { start_ = std::chrono::steady_clock::now(); }

private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace p2p
