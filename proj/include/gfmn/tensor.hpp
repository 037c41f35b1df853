#pragma once

#include <cstdint>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfmn {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Dense row-major float32 array; the universal value type.
struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != (long long)data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) {
        size_t n = (size_t)numel(s);
        return Tensor(std::move(s), std::vector<float>(n, 0.0f));
    }
    static Tensor full(Shape s, float v) {
        size_t n = (size_t)numel(s);
        return Tensor(std::move(s), std::vector<float>(n, v));
    }

    long long size() const { return (long long)data.size(); }

    float& operator[](size_t i) { return data[i]; }
    float operator[](size_t i) const { return data[i]; }

    // 4-d accessor for [N,C,H,W] layouts
    float& at4(int n, int c, int h, int w) {
        int C = shape[1], H = shape[2], W = shape[3];
        return data[((size_t)n * C + c) * H * W + (size_t)h * W + w];
    }
    float at4(int n, int c, int h, int w) const {
        int C = shape[1], H = shape[2], W = shape[3];
        return data[((size_t)n * C + c) * H * W + (size_t)h * W + w];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Deterministic stream derivation: independent substreams from (seed, step, lane).
inline uint64_t mix_seed(uint64_t seed, uint64_t step, uint64_t lane) {
    uint64_t x = seed ^ (step * 0x9e3779b97f4a7c15ULL) ^ (lane * 0xbf58476d1ce4e5b9ULL);
    x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27; x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

inline Tensor randn(Shape s, uint64_t seed, float stddev = 1.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, stddev);
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.data) v = dist(rng);
    return t;
}

inline Tensor uniform(Shape s, uint64_t seed, float lo, float hi) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.data) v = dist(rng);
    return t;
}

/// FNV-1a over raw float bytes; used for parameter fingerprints.
inline uint64_t hash_bytes(const void* p, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* b = (const unsigned char*)p;
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t hash_tensor(const Tensor& t, uint64_t h = 0xcbf29ce484222325ULL) {
    for (int d : t.shape) h = hash_bytes(&d, sizeof(d), h);
    return hash_bytes(t.data.data(), t.data.size() * sizeof(float), h);
}

} // namespace gfmn
