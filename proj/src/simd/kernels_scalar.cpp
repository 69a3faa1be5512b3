#include "clp/simd/kernels.hpp"

namespace clp::simd::scalar {

double dot(const double* a, const double* b, std::size_t n) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gemm(Layout layout, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c) noexcept {
  for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  switch (layout) {
    case Layout::NN:
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = a[i * k + p];
          if (aip != 0.0) axpy(aip, b + p * n, c + i * n, n);
        }
      }
      break;
    case Layout::NT:
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] = dot(a + i * k, b + j * k, k);
      }
      break;
    case Layout::TN:
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < m; ++i) {
          const double api = a[p * m + i];
          if (api != 0.0) axpy(api, b + p * n, c + i * n, n);
        }
      }
      break;
  }
}

}  // namespace clp::simd::scalar
