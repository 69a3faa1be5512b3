#pragma once

// Dense double-precision inner loops used by the autodiff engine.
//
// Every kernel has a portable scalar reference in clp::simd::scalar and,
// on x86-64, an AVX2 variant in clp::simd::avx2. The free functions in
// clp::simd dispatch to the best variant supported by the running CPU;
// the choice is made once per process and can be pinned with force_isa().
//
// axpy is bit-identical across variants. dot and the gemm layouts that
// reduce along K differ only by summation order.

#include <cstddef>
#include <string_view>

namespace clp::simd {

enum class Isa { Scalar, Avx2 };

std::string_view isa_name(Isa isa) noexcept;
bool isa_supported(Isa isa) noexcept;
Isa active_isa() noexcept;
// Pins the dispatch target; throws ContractError if unsupported on this CPU.
void force_isa(Isa isa);

// gemm layouts: C = op(A) * op(B) where op is identity or transpose.
//   NN: A is MxK, B is KxN
//   NT: A is MxK, B is NxK
//   TN: A is KxM, B is KxN
enum class Layout { NN, NT, TN };

double dot(const double* a, const double* b, std::size_t n) noexcept;
// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;
// Overwrites C (MxN).
void gemm(Layout layout, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c) noexcept;

namespace scalar {
double dot(const double* a, const double* b, std::size_t n) noexcept;
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;
void gemm(Layout layout, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c) noexcept;
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define CLP_SIMD_HAVE_AVX2 1
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n) noexcept;
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;
void gemm(Layout layout, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c) noexcept;
}  // namespace avx2
#else
#define CLP_SIMD_HAVE_AVX2 0
#endif

}  // namespace clp::simd
