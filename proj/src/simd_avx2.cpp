#include <immintrin.h>

#include "mixnorm/simd.hpp"

// AVX2 + FMA kernels. Each follows the same pattern: a 4-wide vector main
// loop with unaligned loads, then a scalar remainder loop.

namespace mixnorm {

namespace {

double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

double avx2_dot(const double* a, const double* b, size_t n) {
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  double r = hsum(acc);
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

double avx2_sum(const double* x, size_t n) {
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double r = hsum(acc);
  for (; i < n; ++i) r += x[i];
  return r;
}

double avx2_sumsq(const double* x, size_t n) {
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(x + i);
    acc = _mm256_fmadd_pd(v, v, acc);
  }
  double r = hsum(acc);
  for (; i < n; ++i) r += x[i] * x[i];
  return r;
}

double avx2_ssd(const double* a, const double* b, size_t n) {
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    acc = _mm256_fmadd_pd(d, d, acc);
  }
  double r = hsum(acc);
  for (; i < n; ++i) {
    double d = a[i] - b[i];
    r += d * d;
  }
  return r;
}

double avx2_quad_diag(const double* x, const double* mu, const double* w,
                      size_t n) {
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(mu + i));
    acc = _mm256_fmadd_pd(_mm256_mul_pd(d, d), _mm256_loadu_pd(w + i), acc);
  }
  double r = hsum(acc);
  for (; i < n; ++i) {
    double d = x[i] - mu[i];
    r += d * d * w[i];
  }
  return r;
}

void avx2_axpy(double a, const double* x, double* y, size_t n) {
  __m256d va = _mm256_set1_pd(a);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void avx2_scale(double* x, double a, size_t n) {
  __m256d va = _mm256_set1_pd(a);
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) x[i] *= a;
}

void avx2_weighted_accum(const double* x, double w, double* s1, double* s2,
                         size_t n) {
  __m256d vw = _mm256_set1_pd(w);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vx = _mm256_loadu_pd(x + i);
    __m256d wx = _mm256_mul_pd(vw, vx);
    _mm256_storeu_pd(s1 + i, _mm256_add_pd(_mm256_loadu_pd(s1 + i), wx));
    _mm256_storeu_pd(s2 + i,
                     _mm256_fmadd_pd(wx, vx, _mm256_loadu_pd(s2 + i)));
  }
  for (; i < n; ++i) {
    s1[i] += w * x[i];
    s2[i] += w * x[i] * x[i];
  }
}

void avx2_wmul_accum(const double* a, const double* b, double w, double* acc,
                     size_t n) {
  __m256d vw = _mm256_set1_pd(w);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(acc + i,
                     _mm256_fmadd_pd(vw, prod, _mm256_loadu_pd(acc + i)));
  }
  for (; i < n; ++i) acc[i] += w * a[i] * b[i];
}

void avx2_normalize_affine(const double* x, const double* mu,
                           const double* inv_std, const double* gamma,
                           const double* beta, double* y, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(mu + i));
    __m256d scaled = _mm256_mul_pd(d, _mm256_loadu_pd(inv_std + i));
    __m256d out = _mm256_fmadd_pd(scaled, _mm256_loadu_pd(gamma + i),
                                  _mm256_loadu_pd(beta + i));
    _mm256_storeu_pd(y + i, out);
  }
  for (; i < n; ++i)
    y[i] = (x[i] - mu[i]) * inv_std[i] * gamma[i] + beta[i];
}

void avx2_relu(const double* x, double* y, size_t n) {
  __m256d zero = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

}  // namespace

extern const SimdOps kAvx2Ops;
const SimdOps kAvx2Ops = {
    "avx2",         avx2_dot,           avx2_sum,
    avx2_sumsq,     avx2_ssd,           avx2_quad_diag,
    avx2_axpy,      avx2_scale,         avx2_weighted_accum,
    avx2_wmul_accum, avx2_normalize_affine, avx2_relu,
};

}  // namespace mixnorm
