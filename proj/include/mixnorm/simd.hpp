#pragma once

#include <cstddef>
#include <vector>

namespace mixnorm {

// Kernel table for the data-parallel inner loops (reductions, normalization,
// weighted moment accumulation). A scalar reference implementation always
// exists; an AVX2 (x86-64) or NEON (aarch64) variant is selected at runtime
// when the CPU supports it. The environment variable MIXNORM_SIMD=scalar|avx2|
// neon forces a specific table.
struct SimdOps {
  const char* name;
  // sum_i a[i]*b[i]
  double (*dot)(const double* a, const double* b, size_t n);
  // sum_i x[i]
  double (*sum)(const double* x, size_t n);
  // sum_i x[i]^2
  double (*sumsq)(const double* x, size_t n);
  // sum_i (a[i]-b[i])^2
  double (*ssd)(const double* a, const double* b, size_t n);
  // sum_i (x[i]-mu[i])^2 * w[i]
  double (*quad_diag)(const double* x, const double* mu, const double* w,
                      size_t n);
  // y[i] += a*x[i]
  void (*axpy)(double a, const double* x, double* y, size_t n);
  // x[i] *= a
  void (*scale)(double* x, double a, size_t n);
  // s1[i] += w*x[i]; s2[i] += w*x[i]^2
  void (*weighted_accum)(const double* x, double w, double* s1, double* s2,
                         size_t n);
  // acc[i] += w*a[i]*b[i]
  void (*wmul_accum)(const double* a, const double* b, double w, double* acc,
                     size_t n);
  // y[i] = (x[i]-mu[i])*inv_std[i]*gamma[i] + beta[i]
  void (*normalize_affine)(const double* x, const double* mu,
                           const double* inv_std, const double* gamma,
                           const double* beta, double* y, size_t n);
  // y[i] = max(x[i], 0)
  void (*relu)(const double* x, double* y, size_t n);
};

// Active table, resolved once per process.
const SimdOps& simd();

// Scalar reference table (always available, used by equivalence tests).
const SimdOps& simd_scalar();

// Every table compiled into this binary, scalar first.
std::vector<const SimdOps*> simd_variants();

}  // namespace mixnorm
