#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "fdm/common.hpp"
#include "fdm/rng.hpp"

namespace fdm {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); i++) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// Dense row-major tensor. Batch-first, channels-first layout for rank 4:
// (batch, channels, height, width).
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(std::size_t(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (std::int64_t(v.size()) != shape_numel(shape))
            throw ShapeError("Tensor: data size does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    static Tensor randn(Shape s, RngStream& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = T(rng.normal() * double(stddev));
        return t;
    }

    std::int64_t numel() const { return std::int64_t(v.size()); }
    int dim(int i) const { return shape[std::size_t(i)]; }
    int rank() const { return int(shape.size()); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    // Rank-4 accessors.
    std::int64_t idx4(int b, int c, int y, int x) const {
        return ((std::int64_t(b) * shape[1] + c) * shape[2] + y) * shape[3] + x;
    }
    T& at4(int b, int c, int y, int x) { return v[std::size_t(idx4(b, c, y, x))]; }
    T at4(int b, int c, int y, int x) const { return v[std::size_t(idx4(b, c, y, x))]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(double(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); i++) out.v[i] = U(v[i]);
        return out;
    }
};

template <typename T>
void check_shape(const Tensor<T>& t, const Shape& want, const char* what) {
    if (t.shape != want)
        throw ShapeError(strformat("%s: expected shape %s, got %s", what, shape_str(want).c_str(),
                                   shape_str(t.shape).c_str()));
}

template <typename T>
void check_rank4(const Tensor<T>& t, const char* what) {
    if (t.rank() != 4)
        throw ShapeError(strformat("%s: expected rank-4 tensor, got %s", what, shape_str(t.shape).c_str()));
}

}  // namespace fdm
