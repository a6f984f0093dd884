#include "mixnorm/simd.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>

namespace mixnorm {

namespace {

double scalar_dot(const double* a, const double* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double scalar_sum(const double* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double scalar_sumsq(const double* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

double scalar_ssd(const double* a, const double* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

double scalar_quad_diag(const double* x, const double* mu, const double* w,
                        size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double d = x[i] - mu[i];
    acc += d * d * w[i];
  }
  return acc;
}

void scalar_axpy(double a, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scalar_scale(double* x, double a, size_t n) {
  for (size_t i = 0; i < n; ++i) x[i] *= a;
}

void scalar_weighted_accum(const double* x, double w, double* s1, double* s2,
                           size_t n) {
  for (size_t i = 0; i < n; ++i) {
    s1[i] += w * x[i];
    s2[i] += w * x[i] * x[i];
  }
}

void scalar_wmul_accum(const double* a, const double* b, double w, double* acc,
                       size_t n) {
  for (size_t i = 0; i < n; ++i) acc[i] += w * a[i] * b[i];
}

void scalar_normalize_affine(const double* x, const double* mu,
                             const double* inv_std, const double* gamma,
                             const double* beta, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i)
    y[i] = (x[i] - mu[i]) * inv_std[i] * gamma[i] + beta[i];
}

void scalar_relu(const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

const SimdOps kScalarOps = {
    "scalar",       scalar_dot,           scalar_sum,
    scalar_sumsq,   scalar_ssd,           scalar_quad_diag,
    scalar_axpy,    scalar_scale,         scalar_weighted_accum,
    scalar_wmul_accum, scalar_normalize_affine, scalar_relu,
};

const SimdOps* resolve() {
  const char* forced = std::getenv("MIXNORM_SIMD");
  if (forced != nullptr) {
    for (const SimdOps* ops : simd_variants())
      if (std::strcmp(ops->name, forced) == 0) return ops;
    return &kScalarOps;
  }
#if MIXNORM_HAVE_AVX2
  if (__builtin_cpu_supports("avx2")) {
    for (const SimdOps* ops : simd_variants())
      if (std::strcmp(ops->name, "avx2") == 0) return ops;
  }
#endif
#if MIXNORM_HAVE_NEON
  for (const SimdOps* ops : simd_variants())
    if (std::strcmp(ops->name, "neon") == 0) return ops;
#endif
  return &kScalarOps;
}

}  // namespace

#if MIXNORM_HAVE_AVX2
extern const SimdOps kAvx2Ops;
#endif
#if MIXNORM_HAVE_NEON
extern const SimdOps kNeonOps;
#endif

const SimdOps& simd_scalar() { return kScalarOps; }

std::vector<const SimdOps*> simd_variants() {
  std::vector<const SimdOps*> all = {&kScalarOps};
#if MIXNORM_HAVE_AVX2
  all.push_back(&kAvx2Ops);
#endif
#if MIXNORM_HAVE_NEON
  all.push_back(&kNeonOps);
#endif
  return all;
}

const SimdOps& simd() {
  static const SimdOps* active = resolve();
  return *active;
}

}  // namespace mixnorm
