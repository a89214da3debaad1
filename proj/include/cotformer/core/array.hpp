// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotformer {

// Dense row-major array. Shapes are kept explicit; data is contiguous.
// Values are expected to stay finite; NaN/Inf indicates an error state
// upstream (see Tape::set_check_finite).
template <typename T>
struct Array {
    std::vector<std::int64_t> shape;
    std::vector<T> data;

    Array() = default;
    Array(std::vector<std::int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("Array: data length does not match shape");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto e : s) {
            if (e <= 0) throw std::invalid_argument("Array: extents must be positive");
            n *= e;
        }
        return n;
    }

    static Array zeros(std::vector<std::int64_t> s) {
        auto n = numel_of(s);
        return Array(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)));
    }
    static Array full(std::vector<std::int64_t> s, T v) {
        auto n = numel_of(s);
        return Array(std::move(s), std::vector<T>(static_cast<std::size_t>(n), v));
    }
    static Array scalar(T v) { return Array({1}, {v}); }
    static Array matrix(std::int64_t r, std::int64_t c) { return zeros({r, c}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    // Row/column view of the trailing dimension: an [a,b,...,c] array is
    // treated as (numel/c) rows of c columns. 1-D arrays are a single row.
    std::int64_t cols() const {
        if (shape.empty()) throw std::logic_error("Array: empty shape");
        return shape.back();
    }
    std::int64_t rows() const { return numel() / cols(); }

    T& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
    const T& at(std::int64_t r, std::int64_t c) const {
        return data[static_cast<std::size_t>(r * cols() + c)];
    }

    bool same_shape(const Array& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <typename T>
std::string shape_str(const Array<T>& a) {
    std::string s = "[";
    for (std::size_t i = 0; i < a.shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(a.shape[i]);
    }
    return s + "]";
}

}  // namespace cotformer
