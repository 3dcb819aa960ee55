// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense linear-algebra kernels. Every kernel exists twice: `serial` is the
// plain reference, `parallel` splits independent output rows across OpenMP
// threads. Each output element is reduced in the same order by both, so the
// two produce bit-identical results for any thread count.

#pragma once

#include <cstddef>
#include <span>

namespace speclab::kernels {

/// Row-major problem extents: C[m,n] = op(A) * op(B) with inner extent k.
struct GemmDims {
    std::size_t m;
    std::size_t k;
    std::size_t n;
};

namespace serial {

/// C = A[m,k] * B[k,n], or C += ... when `accumulate`. 64-bit accumulation.
void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c,
            GemmDims d, bool accumulate = false);
/// C = A[m,k] * B[n,k]^T.
void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate = false);
/// C = A[k,m]^T * B[k,n]; here `d.k` is the shared leading extent.
void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate = false);

}  // namespace serial

namespace parallel {

void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c,
            GemmDims d, bool accumulate = false);
void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate = false);
void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               GemmDims d, bool accumulate = false);

}  // namespace parallel

/// Number of OpenMP threads the parallel kernels use (1 without OpenMP).
int num_threads();
void set_num_threads(int n);

/// Minimum m*k*n before the parallel kernels actually fork.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

}  // namespace speclab::kernels
