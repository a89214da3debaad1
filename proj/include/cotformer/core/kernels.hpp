// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace cotformer::detail {

// Accumulating matrix kernels. All loops are laid out so the inner loop is a
// contiguous stride-1 sweep the compiler can vectorize.

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const T aip = arow[p];
            const T* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const T api = arow[i];
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

}  // namespace cotformer::detail
