#include <atomic>

#include "clp/errors.hpp"
#include "clp/simd/kernels.hpp"

namespace clp::simd {

namespace {

Isa detect() noexcept {
#if CLP_SIMD_HAVE_AVX2
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Isa::Avx2;
#endif
  return Isa::Scalar;
}

std::atomic<Isa>& current() noexcept {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) noexcept {
  switch (isa) {
    case Isa::Scalar:
      return "scalar";
    case Isa::Avx2:
      return "avx2";
  }
  return "unknown";
}

bool isa_supported(Isa isa) noexcept {
  if (isa == Isa::Scalar) return true;
#if CLP_SIMD_HAVE_AVX2
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

void force_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw ContractError("ISA " + std::string(isa_name(isa)) + " not supported on this CPU");
  }
  current().store(isa, std::memory_order_relaxed);
}

double dot(const double* a, const double* b, std::size_t n) noexcept {
#if CLP_SIMD_HAVE_AVX2
  if (active_isa() == Isa::Avx2) return avx2::dot(a, b, n);
#endif
  return scalar::dot(a, b, n);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept {
#if CLP_SIMD_HAVE_AVX2
  if (active_isa() == Isa::Avx2) return avx2::axpy(alpha, x, y, n);
#endif
  scalar::axpy(alpha, x, y, n);
}

void gemm(Layout layout, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c) noexcept {
#if CLP_SIMD_HAVE_AVX2
  if (active_isa() == Isa::Avx2) return avx2::gemm(layout, m, n, k, a, b, c);
#endif
  scalar::gemm(layout, m, n, k, a, b, c);
}

}  // namespace clp::simd
