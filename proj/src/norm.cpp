#include "mixnorm/norm.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "mixnorm/simd.hpp"

namespace mixnorm {

namespace {

void check_rows(const Tensor& x, const char* who) {
  if (x.dim() != 2)
    throw std::invalid_argument(std::string(who) + ": expected (m, C) input, got " +
                                x.shape_str());
}

void check_affine(const AffineParams& affine, int C, const char* who) {
  if (affine.gamma.size() != static_cast<size_t>(C) ||
      affine.beta.size() != static_cast<size_t>(C))
    throw std::invalid_argument(std::string(who) + ": affine size mismatch");
}

// Column means and population column variances of (m, C) rows.
void batch_moments(const Tensor& x, std::vector<double>& mean,
                   std::vector<double>& var) {
  const SimdOps& ops = simd();
  int m = x.extent(0), C = x.extent(1);
  mean.assign(static_cast<size_t>(C), 0.0);
  var.assign(static_cast<size_t>(C), 0.0);
  for (int i = 0; i < m; ++i)
    ops.weighted_accum(x.row(i), 1.0, mean.data(), var.data(),
                       static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    double mu = mean[static_cast<size_t>(c)] / m;
    double v = var[static_cast<size_t>(c)] / m - mu * mu;
    mean[static_cast<size_t>(c)] = mu;
    var[static_cast<size_t>(c)] = v > 0.0 ? v : 0.0;
  }
}

}  // namespace

BnResult bn_forward_train(const Tensor& x, BnState& state,
                          const AffineParams& affine) {
  check_rows(x, "bn_forward_train");
  int m = x.extent(0), C = x.extent(1);
  if (m < 2)
    throw std::invalid_argument("bn_forward_train: batch too small (m < 2)");
  check_affine(affine, C, "bn_forward_train");
  if (state.running_mean.size() != static_cast<size_t>(C))
    throw std::invalid_argument("bn_forward_train: state size mismatch");

  std::vector<double> mean, var;
  batch_moments(x, mean, var);

  BnResult out;
  out.cache.inv_std.resize(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c)
    out.cache.inv_std[static_cast<size_t>(c)] =
        1.0 / std::sqrt(var[static_cast<size_t>(c)] + state.eps);
  out.cache.gamma = affine.gamma;

  const SimdOps& ops = simd();
  out.y = Tensor({m, C});
  out.cache.xhat = Tensor({m, C});
  std::vector<double> ones(static_cast<size_t>(C), 1.0);
  std::vector<double> zeros(static_cast<size_t>(C), 0.0);
  for (int i = 0; i < m; ++i) {
    ops.normalize_affine(x.row(i), mean.data(), out.cache.inv_std.data(),
                         ones.data(), zeros.data(), out.cache.xhat.row(i),
                         static_cast<size_t>(C));
    ops.normalize_affine(x.row(i), mean.data(), out.cache.inv_std.data(),
                         affine.gamma.data(), affine.beta.data(), out.y.row(i),
                         static_cast<size_t>(C));
  }

  for (int c = 0; c < C; ++c) {
    state.running_mean[static_cast<size_t>(c)] =
        (1.0 - state.momentum) * state.running_mean[static_cast<size_t>(c)] +
        state.momentum * mean[static_cast<size_t>(c)];
    state.running_var[static_cast<size_t>(c)] =
        (1.0 - state.momentum) * state.running_var[static_cast<size_t>(c)] +
        state.momentum * var[static_cast<size_t>(c)];
  }
  ++state.batches_seen;
  return out;
}

Tensor bn_forward_infer(const Tensor& x, const BnState& state,
                        const AffineParams& affine) {
  check_rows(x, "bn_forward_infer");
  int m = x.extent(0), C = x.extent(1);
  check_affine(affine, C, "bn_forward_infer");
  if (state.batches_seen == 0)
    throw std::runtime_error("bn_forward_infer: state not trained");
  if (state.running_mean.size() != static_cast<size_t>(C))
    throw std::invalid_argument("bn_forward_infer: state size mismatch");

  std::vector<double> inv_std(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c)
    inv_std[static_cast<size_t>(c)] =
        1.0 / std::sqrt(state.running_var[static_cast<size_t>(c)] + state.eps);
  const SimdOps& ops = simd();
  Tensor y({m, C});
  for (int i = 0; i < m; ++i)
    ops.normalize_affine(x.row(i), state.running_mean.data(), inv_std.data(),
                         affine.gamma.data(), affine.beta.data(), y.row(i),
                         static_cast<size_t>(C));
  return y;
}

NormGrads bn_backward(const Tensor& grad_y, const BnCache& cache) {
  check_rows(grad_y, "bn_backward");
  int m = grad_y.extent(0), C = grad_y.extent(1);
  if (!grad_y.same_shape(cache.xhat))
    throw std::invalid_argument("bn_backward: cache shape mismatch");

  const SimdOps& ops = simd();
  NormGrads g;
  g.grad_beta.assign(static_cast<size_t>(C), 0.0);
  g.grad_gamma.assign(static_cast<size_t>(C), 0.0);
  for (int i = 0; i < m; ++i) {
    ops.axpy(1.0, grad_y.row(i), g.grad_beta.data(), static_cast<size_t>(C));
    ops.wmul_accum(grad_y.row(i), cache.xhat.row(i), 1.0, g.grad_gamma.data(),
                   static_cast<size_t>(C));
  }

  g.grad_x = Tensor({m, C});
  for (int i = 0; i < m; ++i) {
    const double* gy = grad_y.row(i);
    const double* xh = cache.xhat.row(i);
    double* gx = g.grad_x.row(i);
    for (int c = 0; c < C; ++c) {
      double scale = cache.gamma[static_cast<size_t>(c)] *
                     cache.inv_std[static_cast<size_t>(c)] / m;
      gx[c] = scale * (m * gy[c] - g.grad_beta[static_cast<size_t>(c)] -
                       xh[c] * g.grad_gamma[static_cast<size_t>(c)]);
    }
  }
  return g;
}

std::vector<double> queue_decay_weights(int length, double zeta) {
  if (length < 1)
    throw std::invalid_argument("queue_decay_weights: length must be >= 1");
  if (!(zeta > 0.0 && zeta < 1.0))
    throw std::invalid_argument("queue_decay_weights: zeta must be in (0, 1)");
  std::vector<double> tau(static_cast<size_t>(length));
  double norm = (1.0 - zeta) / (1.0 - std::pow(zeta, length));
  for (int t = 0; t < length; ++t)
    tau[static_cast<size_t>(t)] = norm * std::pow(zeta, length - t - 1);
  return tau;
}

MnResult mn_forward_frozen(const Tensor& x, const Responsibilities& resp,
                           const std::vector<double>& lambda,
                           const AffineParams& affine, AffineMode mode,
                           double eps) {
  check_rows(x, "mn_forward_frozen");
  int m = x.extent(0), C = x.extent(1), K = resp.K;
  if (resp.m != m)
    throw std::invalid_argument("mn_forward_frozen: responsibilities mismatch");
  if (lambda.size() != static_cast<size_t>(K))
    throw std::invalid_argument("mn_forward_frozen: lambda size mismatch");
  check_affine(affine, C, "mn_forward_frozen");

  const SimdOps& ops = simd();
  MnResult out;
  MnCache& cache = out.cache;
  cache.m = m;
  cache.C = C;
  cache.K = K;
  cache.affine_mode = mode;
  cache.eps = eps;
  cache.resp = resp;
  cache.lambda = lambda;
  cache.gamma = affine.gamma;
  cache.beta = affine.beta;

  size_t kc = static_cast<size_t>(K) * static_cast<size_t>(C);
  cache.mu.assign(kc, 0.0);
  cache.sigma2.assign(kc, 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < K; ++k) {
      double w = resp.nu_hat_at(i, k);
      if (w != 0.0)
        ops.weighted_accum(x.row(i), w,
                           cache.mu.data() + static_cast<size_t>(k) * static_cast<size_t>(C),
                           cache.sigma2.data() + static_cast<size_t>(k) * static_cast<size_t>(C),
                           static_cast<size_t>(C));
    }
  cache.inv_std.resize(kc);
  for (size_t j = 0; j < kc; ++j) {
    double mean = cache.mu[j];
    double var = cache.sigma2[j] - mean * mean;
    cache.sigma2[j] = var;
    cache.inv_std[j] = 1.0 / std::sqrt(var + eps);
  }

  cache.agg_w.resize(static_cast<size_t>(m) * static_cast<size_t>(K));
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < K; ++k) {
      double lk = lambda[static_cast<size_t>(k)];
      cache.agg_w[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)] =
          lk > 0.0 ? resp.nu_at(i, k) / std::sqrt(lk) : 0.0;
    }

  cache.xhat.resize(static_cast<size_t>(m) * kc);
  std::vector<double> ones(static_cast<size_t>(C), 1.0);
  std::vector<double> zeros(static_cast<size_t>(C), 0.0);
  out.y = Tensor({m, C});
  for (int i = 0; i < m; ++i) {
    double* yrow = out.y.row(i);
    for (int k = 0; k < K; ++k) {
      double* xh = cache.xhat.data() +
                   (static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                       static_cast<size_t>(C);
      ops.normalize_affine(x.row(i),
                           cache.mu.data() + static_cast<size_t>(k) * static_cast<size_t>(C),
                           cache.inv_std.data() + static_cast<size_t>(k) * static_cast<size_t>(C),
                           ones.data(), zeros.data(), xh, static_cast<size_t>(C));
      double a = cache.agg_w[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)];
      if (a == 0.0) continue;
      if (mode == AffineMode::per_component) {
        ops.wmul_accum(affine.gamma.data(), xh, a, yrow, static_cast<size_t>(C));
        ops.axpy(a, affine.beta.data(), yrow, static_cast<size_t>(C));
      } else {
        ops.axpy(a, xh, yrow, static_cast<size_t>(C));
      }
    }
    if (mode == AffineMode::post_aggregate)
      for (int c = 0; c < C; ++c)
        yrow[c] = affine.gamma[static_cast<size_t>(c)] * yrow[c] +
                  affine.beta[static_cast<size_t>(c)];
  }
  return out;
}

MnResult mn_forward_train(const Tensor& x, const MnConfig& cfg,
                          const AffineParams& affine, Rng& rng,
                          MnQueue* queue) {
  check_rows(x, "mn_forward_train");
  int m = x.extent(0), C = x.extent(1);
  if (cfg.K < 1)
    throw std::invalid_argument("mn_forward_train: K must be >= 1");
  if (m < cfg.K)
    throw std::invalid_argument("mn_forward_train: insufficient samples (m < K)");
  check_affine(affine, C, "mn_forward_train");

  FitOptions opts;
  opts.em_iters = cfg.em_iters;
  opts.kmeans_iters = cfg.kmeans_iters;
  opts.subsample_fraction = cfg.subsample_fraction;
  opts.prune_threshold = cfg.prune_threshold;
  opts.seed_trials = cfg.seed_trials;
  GmmParams fitted = fit_gmm(x, cfg.K, rng, opts);

  // Posteriors over the full batch, then one weighted-moment pass: this makes
  // the component statistics exact for the batch being normalized and is the
  // differentiable formulation the backward pass assumes.
  Responsibilities resp = e_step(x, fitted);
  std::vector<double> lambda(static_cast<size_t>(resp.K), 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < resp.K; ++k)
      lambda[static_cast<size_t>(k)] += resp.nu_at(i, k);
  for (double& l : lambda) l /= m;

  MnResult out = mn_forward_frozen(x, resp, lambda, affine, cfg.affine, cfg.eps);

  if (queue != nullptr) {
    GmmParams entry;
    entry.K = out.cache.K;
    entry.D = C;
    entry.lambda = lambda;
    entry.mu = out.cache.mu;
    entry.sigma2.resize(out.cache.sigma2.size());
    for (size_t j = 0; j < entry.sigma2.size(); ++j)
      entry.sigma2[j] = std::max(out.cache.sigma2[j], kVarianceFloor);
    queue->push(entry);
  }
  return out;
}

namespace {

enum class GradKind { plain, relu };

// Shared backward core. The upstream-through-xhat term is
// H_ikc = grad_y_ic * agg_w_ik * gamma_c (times the ReLU mask for the relu
// kind); gradients flow through mu and sigma2 but not through nu:
// grad_x_ic = sum_k inv_std_kc * (H_ikc - nu_hat_ik * S1_kc
//                                 - nu_hat_ik * xhat_ikc * S2_kc),
// with S1_kc = sum_i H_ikc and S2_kc = sum_i H_ikc * xhat_ikc.
NormGrads backward_core(const Tensor& grad_y, const MnCache& cache,
                        GradKind kind) {
  check_rows(grad_y, "mn_backward");
  int m = cache.m, C = cache.C, K = cache.K;
  if (grad_y.extent(0) != m || grad_y.extent(1) != C)
    throw std::invalid_argument("mn_backward: cache shape mismatch");

  bool per_component = cache.affine_mode == AffineMode::per_component;
  size_t kc = static_cast<size_t>(K) * static_cast<size_t>(C);
  std::vector<double> s1(kc, 0.0), s2(kc, 0.0);

  auto xhat_at = [&](int i, int k) {
    return cache.xhat.data() +
           (static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
               static_cast<size_t>(C);
  };
  auto mask_at = [&](const double* xh, int c) {
    if (per_component) {
      double z = cache.gamma[static_cast<size_t>(c)] * xh[c] +
                 cache.beta[static_cast<size_t>(c)];
      return z > 0.0 ? 1.0 : 0.0;
    }
    return xh[c] > 0.0 ? 1.0 : 0.0;
  };

  for (int i = 0; i < m; ++i) {
    const double* gy = grad_y.row(i);
    for (int k = 0; k < K; ++k) {
      double a = cache.agg_w[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)];
      if (a == 0.0) continue;
      const double* xh = xhat_at(i, k);
      double* s1k = s1.data() + static_cast<size_t>(k) * static_cast<size_t>(C);
      double* s2k = s2.data() + static_cast<size_t>(k) * static_cast<size_t>(C);
      for (int c = 0; c < C; ++c) {
        double h = gy[c] * a * cache.gamma[static_cast<size_t>(c)];
        if (kind == GradKind::relu) h *= mask_at(xh, c);
        s1k[c] += h;
        s2k[c] += h * xh[c];
      }
    }
  }

  NormGrads g;
  g.grad_x = Tensor({m, C});
  for (int i = 0; i < m; ++i) {
    const double* gy = grad_y.row(i);
    double* gx = g.grad_x.row(i);
    for (int k = 0; k < K; ++k) {
      size_t ik = static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k);
      double a = cache.agg_w[ik];
      double nh = cache.resp.nu_hat_at(i, k);
      if (a == 0.0 && nh == 0.0) continue;
      const double* xh = xhat_at(i, k);
      const double* s1k = s1.data() + static_cast<size_t>(k) * static_cast<size_t>(C);
      const double* s2k = s2.data() + static_cast<size_t>(k) * static_cast<size_t>(C);
      const double* inv = cache.inv_std.data() + static_cast<size_t>(k) * static_cast<size_t>(C);
      for (int c = 0; c < C; ++c) {
        double h = gy[c] * a * cache.gamma[static_cast<size_t>(c)];
        if (kind == GradKind::relu) h *= mask_at(xh, c);
        gx[c] += inv[c] * (h - nh * s1k[c] - nh * xh[c] * s2k[c]);
      }
    }
  }

  // grad_gamma: per channel, sum over (i, k) of grad_y * a * xhat (masked for
  // the relu kind, where the pre-affine slope is xhat as well); identical for
  // both affine placements. grad_beta depends on the placement.
  g.grad_gamma.assign(static_cast<size_t>(C), 0.0);
  g.grad_beta.assign(static_cast<size_t>(C), 0.0);
  for (int i = 0; i < m; ++i) {
    const double* gy = grad_y.row(i);
    for (int k = 0; k < K; ++k) {
      double a = cache.agg_w[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)];
      if (a == 0.0) continue;
      const double* xh = xhat_at(i, k);
      for (int c = 0; c < C; ++c) {
        if (kind == GradKind::relu) {
          if (per_component) {
            double mask = mask_at(xh, c);
            g.grad_gamma[static_cast<size_t>(c)] += gy[c] * a * mask * xh[c];
            g.grad_beta[static_cast<size_t>(c)] += gy[c] * a * mask;
          } else {
            double r = xh[c] > 0.0 ? xh[c] : 0.0;
            g.grad_gamma[static_cast<size_t>(c)] += gy[c] * a * r;
          }
        } else {
          g.grad_gamma[static_cast<size_t>(c)] += gy[c] * a * xh[c];
          if (per_component) g.grad_beta[static_cast<size_t>(c)] += gy[c] * a;
        }
      }
    }
  }
  if (!per_component) {
    const SimdOps& ops = simd();
    for (int i = 0; i < m; ++i)
      ops.axpy(1.0, grad_y.row(i), g.grad_beta.data(), static_cast<size_t>(C));
  }
  return g;
}

}  // namespace

NormGrads mn_backward(const Tensor& grad_y, const MnCache& cache) {
  return backward_core(grad_y, cache, GradKind::plain);
}

NormGrads mn_relu_backward(const Tensor& grad_y, const MnCache& cache) {
  return backward_core(grad_y, cache, GradKind::relu);
}

MnReluResult mn_relu(const MnCache& cache) {
  int m = cache.m, C = cache.C, K = cache.K;
  if (cache.xhat.empty()) throw std::invalid_argument("mn_relu: missing cache");
  bool per_component = cache.affine_mode == AffineMode::per_component;

  MnReluResult out;
  out.exact = Tensor({m, C});
  out.approx = Tensor({m, C});
  for (int i = 0; i < m; ++i) {
    double* ye = out.exact.row(i);
    double* ya = out.approx.row(i);
    for (int k = 0; k < K; ++k) {
      double a = cache.agg_w[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)];
      if (a == 0.0) continue;
      const double* xh = cache.xhat.data() +
                         (static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                             static_cast<size_t>(C);
      for (int c = 0; c < C; ++c) {
        if (per_component) {
          double z = cache.gamma[static_cast<size_t>(c)] * xh[c] +
                     cache.beta[static_cast<size_t>(c)];
          ye[c] += a * (z > 0.0 ? z : 0.0);
          ya[c] += a * z;
        } else {
          ye[c] += a * (xh[c] > 0.0 ? xh[c] : 0.0);
          ya[c] += a * xh[c];
        }
      }
    }
    for (int c = 0; c < C; ++c) {
      if (!per_component) {
        double gamma = cache.gamma[static_cast<size_t>(c)];
        double beta = cache.beta[static_cast<size_t>(c)];
        ye[c] = gamma * ye[c] + beta;
        ya[c] = gamma * ya[c] + beta;
      }
      ya[c] = ya[c] > 0.0 ? ya[c] : 0.0;
    }
  }
  return out;
}

Tensor mn_forward_infer(const Tensor& x, const MnQueue& queue,
                        const AffineParams& affine, double eps, AffineMode mode,
                        QueueWhitening whitening) {
  check_rows(x, "mn_forward_infer");
  int m = x.extent(0), C = x.extent(1);
  check_affine(affine, C, "mn_forward_infer");
  if (queue.entries.empty())
    throw std::runtime_error("mn_forward_infer: queue is empty (not trained)");
  int T = static_cast<int>(queue.entries.size());
  for (const GmmParams& p : queue.entries)
    if (p.D != C)
      throw std::invalid_argument("mn_forward_infer: entry dimension mismatch");

  std::vector<double> tau = queue_decay_weights(T, queue.zeta);

  // Per-(entry, component) density tables.
  struct TermTable {
    double log_w = 0.0;      // log(tau_t * lambda_k)
    double whiten = 0.0;     // 1/sqrt(lambda_k) or 1/sqrt(tau_t*lambda_k)
    double log_norm = 0.0;   // Gaussian normalizer
    const double* mu = nullptr;
    std::vector<double> inv_sigma2;
    std::vector<double> inv_std_eps;  // 1/sqrt(sigma2+eps)
  };
  std::vector<TermTable> terms;
  for (int t = 0; t < T; ++t) {
    const GmmParams& p = queue.entries[static_cast<size_t>(t)];
    for (int k = 0; k < p.K; ++k) {
      double lk = p.lambda[static_cast<size_t>(k)];
      if (lk <= 0.0) continue;
      TermTable tt;
      double wl = whitening == QueueWhitening::literal_tau
                      ? tau[static_cast<size_t>(t)] * lk
                      : lk;
      tt.whiten = 1.0 / std::sqrt(wl);
      tt.log_w = std::log(tau[static_cast<size_t>(t)]) + std::log(lk);
      tt.mu = p.mu_row(k);
      tt.inv_sigma2.resize(static_cast<size_t>(C));
      tt.inv_std_eps.resize(static_cast<size_t>(C));
      double base = 0.0;
      for (int c = 0; c < C; ++c) {
        double s2 = p.sigma2_row(k)[c];
        base += std::log(2.0 * std::numbers::pi * s2);
        tt.inv_sigma2[static_cast<size_t>(c)] = 1.0 / s2;
        tt.inv_std_eps[static_cast<size_t>(c)] = 1.0 / std::sqrt(s2 + eps);
      }
      tt.log_norm = -0.5 * base;
      terms.push_back(std::move(tt));
    }
  }

  const SimdOps& ops = simd();
  Tensor y({m, C});
  std::vector<double> logw(terms.size());
  for (int i = 0; i < m; ++i) {
    const double* xi = x.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < terms.size(); ++j) {
      const TermTable& tt = terms[j];
      double quad = ops.quad_diag(xi, tt.mu, tt.inv_sigma2.data(),
                                  static_cast<size_t>(C));
      logw[j] = tt.log_w + tt.log_norm - 0.5 * quad;
      if (logw[j] > mx) mx = logw[j];
    }
    double total = 0.0;
    for (size_t j = 0; j < terms.size(); ++j) {
      logw[j] = std::exp(logw[j] - mx);
      total += logw[j];
    }
    double* yrow = y.row(i);
    for (size_t j = 0; j < terms.size(); ++j) {
      const TermTable& tt = terms[j];
      double a = (logw[j] / total) * tt.whiten;
      if (a == 0.0) continue;
      for (int c = 0; c < C; ++c) {
        double xh = (xi[c] - tt.mu[c]) * tt.inv_std_eps[static_cast<size_t>(c)];
        if (mode == AffineMode::per_component)
          yrow[c] += a * (affine.gamma[static_cast<size_t>(c)] * xh +
                          affine.beta[static_cast<size_t>(c)]);
        else
          yrow[c] += a * xh;
      }
    }
    if (mode == AffineMode::post_aggregate)
      for (int c = 0; c < C; ++c)
        yrow[c] = affine.gamma[static_cast<size_t>(c)] * yrow[c] +
                  affine.beta[static_cast<size_t>(c)];
  }
  return y;
}

}  // namespace mixnorm
