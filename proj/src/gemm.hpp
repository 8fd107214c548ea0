#pragma once

#include <cstddef>

namespace ersm::detail {

// Row-major, accumulating: C[M,N] += A[M,K] * B[K,N].
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);

// C[M,N] += A^T * B where A is stored [K,M].
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);

// As gemm_nn but C is stored transposed, [N,M].
void gemm_nn_tc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                double* c);

// Out[cols, rows] = In[rows, cols]^T.
void transpose(std::size_t rows, std::size_t cols, const double* in, double* out);

}  // namespace ersm::detail
