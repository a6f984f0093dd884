#include <arm_neon.h>

#include "mixnorm/simd.hpp"

// NEON (aarch64) kernels: 2-wide float64 main loop plus scalar remainder.

namespace mixnorm {

namespace {

double hsum(float64x2_t v) { return vgetq_lane_f64(v, 0) + vgetq_lane_f64(v, 1); }

double neon_dot(const double* a, const double* b, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2)
    acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
  double r = hsum(acc);
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

double neon_sum(const double* x, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
  double r = hsum(acc);
  for (; i < n; ++i) r += x[i];
  return r;
}

double neon_sumsq(const double* x, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t v = vld1q_f64(x + i);
    acc = vfmaq_f64(acc, v, v);
  }
  double r = hsum(acc);
  for (; i < n; ++i) r += x[i] * x[i];
  return r;
}

double neon_ssd(const double* a, const double* b, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t d = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
    acc = vfmaq_f64(acc, d, d);
  }
  double r = hsum(acc);
  for (; i < n; ++i) {
    double d = a[i] - b[i];
    r += d * d;
  }
  return r;
}

double neon_quad_diag(const double* x, const double* mu, const double* w,
                      size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t d = vsubq_f64(vld1q_f64(x + i), vld1q_f64(mu + i));
    acc = vfmaq_f64(acc, vmulq_f64(d, d), vld1q_f64(w + i));
  }
  double r = hsum(acc);
  for (; i < n; ++i) {
    double d = x[i] - mu[i];
    r += d * d * w[i];
  }
  return r;
}

void neon_axpy(double a, const double* x, double* y, size_t n) {
  float64x2_t va = vdupq_n_f64(a);
  size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

void neon_scale(double* x, double a, size_t n) {
  float64x2_t va = vdupq_n_f64(a);
  size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(x + i, vmulq_f64(va, vld1q_f64(x + i)));
  for (; i < n; ++i) x[i] *= a;
}

void neon_weighted_accum(const double* x, double w, double* s1, double* s2,
                         size_t n) {
  float64x2_t vw = vdupq_n_f64(w);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t vx = vld1q_f64(x + i);
    float64x2_t wx = vmulq_f64(vw, vx);
    vst1q_f64(s1 + i, vaddq_f64(vld1q_f64(s1 + i), wx));
    vst1q_f64(s2 + i, vfmaq_f64(vld1q_f64(s2 + i), wx, vx));
  }
  for (; i < n; ++i) {
    s1[i] += w * x[i];
    s2[i] += w * x[i] * x[i];
  }
}

void neon_wmul_accum(const double* a, const double* b, double w, double* acc,
                     size_t n) {
  float64x2_t vw = vdupq_n_f64(w);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t prod = vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
    vst1q_f64(acc + i, vfmaq_f64(vld1q_f64(acc + i), vw, prod));
  }
  for (; i < n; ++i) acc[i] += w * a[i] * b[i];
}

void neon_normalize_affine(const double* x, const double* mu,
                           const double* inv_std, const double* gamma,
                           const double* beta, double* y, size_t n) {
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t d = vsubq_f64(vld1q_f64(x + i), vld1q_f64(mu + i));
    float64x2_t scaled = vmulq_f64(d, vld1q_f64(inv_std + i));
    float64x2_t out =
        vfmaq_f64(vld1q_f64(beta + i), scaled, vld1q_f64(gamma + i));
    vst1q_f64(y + i, out);
  }
  for (; i < n; ++i)
    y[i] = (x[i] - mu[i]) * inv_std[i] * gamma[i] + beta[i];
}

void neon_relu(const double* x, double* y, size_t n) {
  float64x2_t zero = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vmaxq_f64(vld1q_f64(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

}  // namespace

extern const SimdOps kNeonOps;
const SimdOps kNeonOps = {
    "neon",         neon_dot,           neon_sum,
    neon_sumsq,     neon_ssd,           neon_quad_diag,
    neon_axpy,      neon_scale,         neon_weighted_accum,
    neon_wmul_accum, neon_normalize_affine, neon_relu,
};

}  // namespace mixnorm
