#include "gemm.hpp"

#include <cstring>

namespace ersm::detail {

namespace {

constexpr std::size_t kLanes = 8;
typedef double vec __attribute__((vector_size(kLanes * sizeof(double))));

inline vec loadv(const double* p) {
  vec v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void add_storev(double* p, vec v) {
  vec old = loadv(p);
  old += v;
  std::memcpy(p, &old, sizeof old);
}

// C[M,N] += op(A) * B, with op(A)(i, p) supplied by load_a. Each C element is
// accumulated over p in order, then added to C once.
template <bool kTransposeC, typename LoadA>
void gemm_tiled(std::size_t m, std::size_t n, std::size_t k, LoadA load_a, const double* b,
                double* c) {
  // Element (i, j) of the product lives at c[j * m + i] when C is stored transposed.
  auto at = [c, m, n](std::size_t i, std::size_t j) -> double& {
    return kTransposeC ? c[j * m + i] : c[i * n + j];
  };
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 2 * kLanes <= n; j += 2 * kLanes) {
      vec acc[4][2] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const vec b0 = loadv(b + p * n + j);
        const vec b1 = loadv(b + p * n + j + kLanes);
        for (int r = 0; r < 4; ++r) {
          const double a = load_a(i + r, p);
          acc[r][0] += a * b0;
          acc[r][1] += a * b1;
        }
      }
      for (std::size_t r = 0; r < 4; ++r) {
        if constexpr (kTransposeC) {
          for (std::size_t l = 0; l < kLanes; ++l) {
            at(i + r, j + l) += acc[r][0][l];
            at(i + r, j + kLanes + l) += acc[r][1][l];
          }
        } else {
          add_storev(c + (i + r) * n + j, acc[r][0]);
          add_storev(c + (i + r) * n + j + kLanes, acc[r][1]);
        }
      }
    }
    for (; j < n; ++j) {
      double acc[4] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const double bv = b[p * n + j];
        for (int r = 0; r < 4; ++r) acc[r] += load_a(i + r, p) * bv;
      }
      for (std::size_t r = 0; r < 4; ++r) at(i + r, j) += acc[r];
    }
  }
  for (; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += load_a(i, p) * b[p * n + j];
      at(i, j) += acc;
    }
  }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  gemm_tiled<false>(m, n, k, [a, k](std::size_t i, std::size_t p) { return a[i * k + p]; }, b,
                    c);
}

void gemm_nn_tc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                double* c) {
  gemm_tiled<true>(m, n, k, [a, k](std::size_t i, std::size_t p) { return a[i * k + p]; }, b,
                   c);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  gemm_tiled<false>(m, n, k, [a, m](std::size_t i, std::size_t p) { return a[p * m + i]; }, b,
                    c);
}

void transpose(std::size_t rows, std::size_t cols, const double* in, double* out) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = r0 + kBlock < rows ? r0 + kBlock : rows;
      const std::size_t c1 = c0 + kBlock < cols ? c0 + kBlock : cols;
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
      }
    }
  }
}

}  // namespace ersm::detail
