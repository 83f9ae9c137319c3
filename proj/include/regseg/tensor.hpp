#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "regseg/errors.hpp"

namespace regseg {

// Dense row-major N-d tensor. The last axis is contiguous.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), T(0));
    }

    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<long long>(data.size()) != count(shape))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape product " + std::to_string(count(shape)));
    }

    static long long count(const std::vector<int>& s) {
        long long n = 1;
        for (int e : s) {
            if (e <= 0) throw ShapeError("non-positive extent " + std::to_string(e));
            n *= e;
        }
        return n;
    }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    long long size() const { return static_cast<long long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](long long i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](long long i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    // Index of the first non-finite value, or -1.
    long long first_nonfinite() const {
        for (long long i = 0; i < size(); ++i)
            if (!std::isfinite(static_cast<double>(data[static_cast<size_t>(i)]))) return i;
        return -1;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

// Integer label volume, [D,H,W].
struct LabelMap {
    std::vector<int> shape;  // D,H,W
    std::vector<uint8_t> data;

    LabelMap() = default;
    explicit LabelMap(std::vector<int> s) : shape(std::move(s)) {
        long long n = 1;
        for (int e : shape) n *= e;
        data.assign(static_cast<size_t>(n), 0);
    }
    long long size() const { return static_cast<long long>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    uint8_t* ptr() { return data.data(); }
    const uint8_t* ptr() const { return data.data(); }
    uint8_t& operator[](long long i) { return data[static_cast<size_t>(i)]; }
    uint8_t operator[](long long i) const { return data[static_cast<size_t>(i)]; }
};

}  // namespace regseg
