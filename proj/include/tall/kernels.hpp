// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Sequential dense kernels. Every output row is computed from its own input
// row with a fixed reduction order, so a row's result never depends on the
// contents of other rows.

#pragma once

#include <cstddef>
#include <vector>

namespace tall::kernel {

// C[m x n] (+)= A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k x n] (+)= A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < k * n; ++i) c[i] = 0.0;
  }
  for (std::size_t p = 0; p < m; ++p) {
    const double* arow = a + p * k;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  std::vector<double> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

}  // namespace tall::kernel
