#pragma once

// Row-major matrix products with a fixed accumulation order: every output
// element sums its reduction index in ascending order, independent of the
// number of rows. This keeps results bit-identical across batch sizes.

#include <cstddef>
#include <vector>

#include "exuseg/tensor.hpp"

namespace exuseg::gemm {

// C[m,n] = (accumulate ? C : 0) + A[m,k] * B[k,n]
inline void nn(std::size_t m, std::size_t n, std::size_t k, const real* a, const real* b, real* c,
               bool accumulate = false) {
  if (n < 8) {
    // Narrow outputs: dot products against a transposed B. Same summation order.
    std::vector<real> bt(n * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    for (std::size_t i = 0; i < m; ++i) {
      const real* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const real* bcol = bt.data() + j * k;
        real s = accumulate ? c[i * n + j] : real{0};
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * bcol[p];
        c[i * n + j] = s;
      }
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    real* crow = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0;
    const real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = arow[p];
      const real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]; reduction over m in ascending order.
inline void tn_acc(std::size_t m, std::size_t n, std::size_t k, const real* a, const real* b, real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const real* arow = a + i * k;
    const real* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = arow[p];
      real* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] = A[m,n] * B[k,n]^T; reduction over n in ascending order.
inline void nt(std::size_t m, std::size_t n, std::size_t k, const real* a, const real* b, real* c) {
  std::vector<real> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  for (std::size_t i = 0; i < m; ++i) {
    real* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) crow[p] = 0;
    const real* arow = a + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const real av = arow[j];
      const real* btrow = bt.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) crow[p] += av * btrow[p];
    }
  }
}

}  // namespace exuseg::gemm
