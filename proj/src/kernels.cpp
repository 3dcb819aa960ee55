// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/kernels.hpp"

#include <cassert>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "speclab/tensor.hpp"

namespace speclab::kernels {

namespace {

inline void store_row(const double* acc, float* out, std::size_t n, bool accumulate) {
    if (accumulate) {
        for (std::size_t j = 0; j < n; ++j) out[j] += static_cast<float>(acc[j]);
    } else {
        for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<float>(acc[j]);
    }
}

// One output row of A*B. `acc` holds n doubles.
inline void matmul_row(const float* a_row, const float* b, float* c_row, double* acc,
                       std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t j = 0; j < n; ++j) acc[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double av = a_row[p];
        const float* b_row = b + p * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(b_row[j]);
    }
    store_row(acc, c_row, n, accumulate);
}

// One output row of A^T*B: row `r` of the result reduces over the k rows of A.
inline void matmul_tn_row(const float* a, const float* b, float* c_row, double* acc,
                          std::size_t r, GemmDims d, bool accumulate) {
    for (std::size_t j = 0; j < d.n; ++j) acc[j] = 0.0;
    for (std::size_t p = 0; p < d.k; ++p) {
        const double av = a[p * d.m + r];
        const float* b_row = b + p * d.n;
        for (std::size_t j = 0; j < d.n; ++j) acc[j] += av * static_cast<double>(b_row[j]);
    }
    store_row(acc, c_row, d.n, accumulate);
}

void transpose_into(std::span<const float> b, float* bt, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) bt[j * rows + i] = b[i * cols + j];
}

}  // namespace

namespace serial {

void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c, GemmDims d,
            bool accumulate) {
    assert(a.size() >= d.m * d.k && b.size() >= d.k * d.n && c.size() >= d.m * d.n);
    TrackedArray<double> acc(d.n, AllocCategory::Scratch);
    for (std::size_t i = 0; i < d.m; ++i)
        matmul_row(a.data() + i * d.k, b.data(), c.data() + i * d.n, acc.data(), d.k, d.n,
                   accumulate);
}

void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate) {
    TrackedArray<float> bt(d.k * d.n, AllocCategory::Scratch);
    transpose_into(b, bt.data(), d.n, d.k);
    matmul(a, bt.span(), c, d, accumulate);
}

void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate) {
    TrackedArray<double> acc(d.n, AllocCategory::Scratch);
    for (std::size_t r = 0; r < d.m; ++r)
        matmul_tn_row(a.data(), b.data(), c.data() + r * d.n, acc.data(), r, d, accumulate);
}

}  // namespace serial

namespace parallel {

void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c, GemmDims d,
            bool accumulate) {
    assert(a.size() >= d.m * d.k && b.size() >= d.k * d.n && c.size() >= d.m * d.n);
    const bool fork = d.m * d.k * d.n >= kParallelThreshold && d.m > 1;
#pragma omp parallel if (fork)
    {
        TrackedArray<double> acc(d.n, AllocCategory::Scratch);
#pragma omp for schedule(static)
        for (std::size_t i = 0; i < d.m; ++i)
            matmul_row(a.data() + i * d.k, b.data(), c.data() + i * d.n, acc.data(), d.k, d.n,
                       accumulate);
    }
}

void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate) {
    TrackedArray<float> bt(d.k * d.n, AllocCategory::Scratch);
    transpose_into(b, bt.data(), d.n, d.k);
    matmul(a, bt.span(), c, d, accumulate);
}

void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate) {
    const bool fork = d.m * d.k * d.n >= kParallelThreshold && d.m > 1;
#pragma omp parallel if (fork)
    {
        TrackedArray<double> acc(d.n, AllocCategory::Scratch);
#pragma omp for schedule(static)
        for (std::size_t r = 0; r < d.m; ++r)
            matmul_tn_row(a.data(), b.data(), c.data() + r * d.n, acc.data(), r, d, accumulate);
    }
}

}  // namespace parallel

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

}  // namespace speclab::kernels
