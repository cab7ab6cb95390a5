#pragma once

#include <cstddef>
#include <string_view>

namespace htkg::kernels {

// Dense double-precision kernels behind the tensor engine. Every entry has a
// scalar reference implementation and, on x86-64, an AVX2/FMA variant picked
// at runtime. GEMM operands are row-major:
//   gemm_nn: C(m x n)  = A(m x k)  * B(k x n)
//   gemm_nt: C(m x n)  = A(m x k)  * B(n x k)^T
//   gemm_tn: C(m x n)  = A(k x m)^T * B(k x n)
// `accum` adds into C instead of overwriting it.
struct Ops {
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(const double* x, double a, double* out, std::size_t n);
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accum);
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accum);
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accum);
};

enum class Backend { scalar, avx2 };

// Active table. Chosen once at startup: best supported backend, unless the
// HTKG_KERNELS environment variable ("scalar" or "avx2") overrides it.
const Ops& ops();
Backend active_backend();

bool backend_available(Backend b);
// Switches the active table; returns false (and leaves it unchanged) if the
// requested backend is not available on this machine.
bool set_backend(Backend b);
// Table for an explicit backend, for equivalence tests. Throws if unavailable.
const Ops& ops_for(Backend b);
std::string_view backend_name(Backend b);

}  // namespace htkg::kernels
