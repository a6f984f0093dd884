#include "mixnorm/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "mixnorm/simd.hpp"

namespace mixnorm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_samples(const Tensor& samples) {
  if (samples.dim() != 2)
    throw std::invalid_argument("gmm: samples must be (m, D), got " +
                                samples.shape_str());
}

void check_params(const GmmParams& p) {
  if (p.K <= 0 || p.D <= 0 ||
      p.lambda.size() != static_cast<size_t>(p.K) ||
      p.mu.size() != static_cast<size_t>(p.K) * static_cast<size_t>(p.D) ||
      p.sigma2.size() != p.mu.size())
    throw std::invalid_argument("gmm: malformed GmmParams");
}

int default_trials(int K) {
  return static_cast<int>(std::ceil(2.0 + std::log(static_cast<double>(K))));
}

// Nearest center by squared distance, ties to the lowest index.
int nearest_center(const double* x, const std::vector<double>& centers, int K,
                   int D, double* best_out = nullptr) {
  const SimdOps& ops = simd();
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    double d = ops.ssd(x, centers.data() + static_cast<size_t>(k) * static_cast<size_t>(D),
                       static_cast<size_t>(D));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  if (best_out != nullptr) *best_out = best_d;
  return best;
}

// Log densities of one sample under every component plus the mixture weights:
// out[k] = log lambda_k + log N(x; mu_k, diag sigma2_k).
void log_weighted_densities(const double* x, const GmmParams& p,
                            const std::vector<double>& log_lambda,
                            const std::vector<double>& log_norm,
                            const std::vector<double>& inv_sigma2,
                            double* out) {
  const SimdOps& ops = simd();
  for (int k = 0; k < p.K; ++k) {
    if (log_lambda[static_cast<size_t>(k)] == kNegInf) {
      out[k] = kNegInf;
      continue;
    }
    double quad = ops.quad_diag(
        x, p.mu_row(k),
        inv_sigma2.data() + static_cast<size_t>(k) * static_cast<size_t>(p.D),
        static_cast<size_t>(p.D));
    out[k] = log_lambda[static_cast<size_t>(k)] + log_norm[static_cast<size_t>(k)] - 0.5 * quad;
  }
}

struct DensityTables {
  std::vector<double> log_lambda;
  std::vector<double> log_norm;
  std::vector<double> inv_sigma2;
};

DensityTables make_tables(const GmmParams& p) {
  DensityTables t;
  t.log_lambda.resize(static_cast<size_t>(p.K));
  t.log_norm.resize(static_cast<size_t>(p.K));
  t.inv_sigma2.resize(static_cast<size_t>(p.K) * static_cast<size_t>(p.D));
  for (int k = 0; k < p.K; ++k) {
    t.log_lambda[static_cast<size_t>(k)] =
        p.lambda[static_cast<size_t>(k)] > 0.0 ? std::log(p.lambda[static_cast<size_t>(k)]) : kNegInf;
    double base = 0.0;
    for (int d = 0; d < p.D; ++d) {
      double s2 = p.sigma2_row(k)[d];
      if (s2 <= 0.0)
        throw std::invalid_argument("gmm: non-positive variance");
      base += std::log(2.0 * std::numbers::pi * s2);
      t.inv_sigma2[static_cast<size_t>(k) * static_cast<size_t>(p.D) + static_cast<size_t>(d)] = 1.0 / s2;
    }
    t.log_norm[static_cast<size_t>(k)] = -0.5 * base;
  }
  return t;
}

}  // namespace

std::vector<double> kmeanspp_seed(const Tensor& samples, int K, Rng& rng,
                                  int trials) {
  check_samples(samples);
  int m = samples.extent(0), D = samples.extent(1);
  if (K < 1) throw std::invalid_argument("kmeanspp_seed: K must be >= 1");
  if (m < K)
    throw std::invalid_argument("kmeanspp_seed: insufficient samples (m < K)");
  if (trials < 0) trials = default_trials(K);
  if (trials < 1) trials = 1;

  const SimdOps& ops = simd();
  std::vector<double> best_centers;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<double> centers(static_cast<size_t>(K) * static_cast<size_t>(D));
  std::vector<double> d2(static_cast<size_t>(m));

  for (int trial = 0; trial < trials; ++trial) {
    int first = rng.uniform_int(m);
    std::copy_n(samples.row(first), D, centers.begin());
    for (int i = 0; i < m; ++i)
      d2[static_cast<size_t>(i)] =
          ops.ssd(samples.row(i), centers.data(), static_cast<size_t>(D));

    for (int k = 1; k < K; ++k) {
      double total = ops.sum(d2.data(), static_cast<size_t>(m));
      int pick;
      if (total > 0.0) {
        double u = rng.uniform() * total;
        double acc = 0.0;
        pick = m - 1;
        for (int i = 0; i < m; ++i) {
          acc += d2[static_cast<size_t>(i)];
          if (u < acc) {
            pick = i;
            break;
          }
        }
      } else {
        pick = rng.uniform_int(m);
      }
      double* ck = centers.data() + static_cast<size_t>(k) * static_cast<size_t>(D);
      std::copy_n(samples.row(pick), D, ck);
      for (int i = 0; i < m; ++i) {
        double d = ops.ssd(samples.row(i), ck, static_cast<size_t>(D));
        if (d < d2[static_cast<size_t>(i)]) d2[static_cast<size_t>(i)] = d;
      }
    }

    double cost = ops.sum(d2.data(), static_cast<size_t>(m));
    if (cost < best_cost) {
      best_cost = cost;
      best_centers = centers;
    }
  }
  return best_centers;
}

double kmeans_iterate(const Tensor& samples, std::vector<double>& centers,
                      int K, int iters, std::vector<double>* wcss_trace) {
  check_samples(samples);
  int m = samples.extent(0), D = samples.extent(1);
  if (centers.size() != static_cast<size_t>(K) * static_cast<size_t>(D))
    throw std::invalid_argument("kmeans_iterate: centers size mismatch");
  if (iters < 0) throw std::invalid_argument("kmeans_iterate: iters must be >= 0");

  const SimdOps& ops = simd();
  std::vector<int> assign(static_cast<size_t>(m));
  std::vector<double> dist(static_cast<size_t>(m));
  std::vector<int> counts(static_cast<size_t>(K));
  double wcss = 0.0;

  auto assign_all = [&]() {
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < m; ++i) {
      assign[static_cast<size_t>(i)] =
          nearest_center(samples.row(i), centers, K, D, &dist[static_cast<size_t>(i)]);
      ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
    }
  };

  for (int it = 0; it < iters; ++it) {
    assign_all();

    // Reseed each empty cluster to the point currently farthest from its
    // assigned center; every reseeded point is claimed at most once.
    for (int k = 0; k < K; ++k) {
      if (counts[static_cast<size_t>(k)] > 0) continue;
      int far = -1;
      double far_d = -1.0;
      for (int i = 0; i < m; ++i) {
        if (counts[static_cast<size_t>(assign[static_cast<size_t>(i)])] <= 1) continue;
        if (dist[static_cast<size_t>(i)] > far_d) {
          far_d = dist[static_cast<size_t>(i)];
          far = i;
        }
      }
      if (far < 0) continue;
      std::copy_n(samples.row(far), D,
                  centers.begin() + static_cast<size_t>(k) * static_cast<size_t>(D));
      --counts[static_cast<size_t>(assign[static_cast<size_t>(far)])];
      assign[static_cast<size_t>(far)] = k;
      counts[static_cast<size_t>(k)] = 1;
      dist[static_cast<size_t>(far)] = 0.0;
    }

    std::fill(centers.begin(), centers.end(), 0.0);
    for (int i = 0; i < m; ++i)
      ops.axpy(1.0, samples.row(i),
               centers.data() + static_cast<size_t>(assign[static_cast<size_t>(i)]) * static_cast<size_t>(D),
               static_cast<size_t>(D));
    for (int k = 0; k < K; ++k)
      if (counts[static_cast<size_t>(k)] > 0)
        ops.scale(centers.data() + static_cast<size_t>(k) * static_cast<size_t>(D),
                  1.0 / counts[static_cast<size_t>(k)], static_cast<size_t>(D));

    wcss = 0.0;
    for (int i = 0; i < m; ++i) {
      double d;
      nearest_center(samples.row(i), centers, K, D, &d);
      wcss += d;
    }
    if (wcss_trace != nullptr) wcss_trace->push_back(wcss);
  }

  if (iters == 0) {
    wcss = 0.0;
    for (int i = 0; i < m; ++i) {
      double d;
      nearest_center(samples.row(i), centers, K, D, &d);
      wcss += d;
    }
  }
  return wcss;
}

Responsibilities e_step(const Tensor& samples, const GmmParams& params) {
  check_samples(samples);
  check_params(params);
  if (samples.extent(1) != params.D)
    throw std::invalid_argument("e_step: dimension mismatch");
  int m = samples.extent(0), K = params.K;

  DensityTables tables = make_tables(params);
  Responsibilities resp;
  resp.m = m;
  resp.K = K;
  resp.nu.assign(static_cast<size_t>(m) * static_cast<size_t>(K), 0.0);
  resp.nu_hat.assign(static_cast<size_t>(m) * static_cast<size_t>(K), 0.0);

  std::vector<double> logw(static_cast<size_t>(K));
  std::vector<double> colsum(static_cast<size_t>(K), 0.0);
  for (int i = 0; i < m; ++i) {
    log_weighted_densities(samples.row(i), params, tables.log_lambda,
                           tables.log_norm, tables.inv_sigma2, logw.data());
    double mx = *std::max_element(logw.begin(), logw.end());
    double total = 0.0;
    for (int k = 0; k < K; ++k) {
      double v = logw[static_cast<size_t>(k)] == kNegInf ? 0.0 : std::exp(logw[static_cast<size_t>(k)] - mx);
      resp.nu_at(i, k) = v;
      total += v;
    }
    for (int k = 0; k < K; ++k) {
      resp.nu_at(i, k) /= total;
      colsum[static_cast<size_t>(k)] += resp.nu_at(i, k);
    }
  }
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < K; ++k)
      resp.nu_hat_at(i, k) =
          colsum[static_cast<size_t>(k)] > 0.0 ? resp.nu_at(i, k) / colsum[static_cast<size_t>(k)] : 0.0;
  return resp;
}

GmmParams m_step(const Tensor& samples, const Responsibilities& resp) {
  check_samples(samples);
  int m = samples.extent(0), D = samples.extent(1), K = resp.K;
  if (resp.m != m)
    throw std::invalid_argument("m_step: responsibilities do not match samples");

  std::vector<double> colsum(static_cast<size_t>(K), 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < K; ++k) colsum[static_cast<size_t>(k)] += resp.nu_at(i, k);
  for (int k = 0; k < K; ++k)
    if (colsum[static_cast<size_t>(k)] <= 0.0)
      throw std::invalid_argument("m_step: zero-mass component (prune first)");

  const SimdOps& ops = simd();
  GmmParams p;
  p.K = K;
  p.D = D;
  p.lambda.resize(static_cast<size_t>(K));
  p.mu.assign(static_cast<size_t>(K) * static_cast<size_t>(D), 0.0);
  p.sigma2.assign(static_cast<size_t>(K) * static_cast<size_t>(D), 0.0);

  for (int i = 0; i < m; ++i)
    for (int k = 0; k < K; ++k) {
      double w = resp.nu_hat_at(i, k);
      if (w != 0.0)
        ops.weighted_accum(samples.row(i), w, p.mu_row(k), p.sigma2_row(k),
                           static_cast<size_t>(D));
    }

  for (int k = 0; k < K; ++k) {
    p.lambda[static_cast<size_t>(k)] = colsum[static_cast<size_t>(k)] / m;
    for (int d = 0; d < D; ++d) {
      double mean = p.mu_row(k)[d];
      double var = p.sigma2_row(k)[d] - mean * mean;
      p.sigma2_row(k)[d] = std::max(var, kVarianceFloor);
    }
  }
  return p;
}

double log_likelihood(const Tensor& samples, const GmmParams& params) {
  check_samples(samples);
  check_params(params);
  if (samples.extent(1) != params.D)
    throw std::invalid_argument("log_likelihood: dimension mismatch");
  int m = samples.extent(0), K = params.K;

  DensityTables tables = make_tables(params);
  std::vector<double> logw(static_cast<size_t>(K));
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    log_weighted_densities(samples.row(i), params, tables.log_lambda,
                           tables.log_norm, tables.inv_sigma2, logw.data());
    double mx = *std::max_element(logw.begin(), logw.end());
    double s = 0.0;
    for (int k = 0; k < K; ++k)
      if (logw[static_cast<size_t>(k)] != kNegInf) s += std::exp(logw[static_cast<size_t>(k)] - mx);
    total += mx + std::log(s);
  }
  return total / m;
}

std::pair<GmmParams, Responsibilities> prune_components(
    const GmmParams& params, const Responsibilities& resp, double threshold) {
  check_params(params);
  if (threshold < 0.0 || threshold >= 1.0)
    throw std::invalid_argument("prune_components: threshold must be in [0, 1)");
  if (resp.K != params.K)
    throw std::invalid_argument("prune_components: K mismatch");
  int K = params.K, m = resp.m, D = params.D;

  std::vector<double> colsum(static_cast<size_t>(K), 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < K; ++k) colsum[static_cast<size_t>(k)] += resp.nu_at(i, k);

  // A component survives if its weight clears the threshold and it carries
  // posterior mass; if nothing survives, keep the heaviest massive one.
  std::vector<int> keep;
  for (int k = 0; k < K; ++k)
    if (params.lambda[static_cast<size_t>(k)] >= threshold && colsum[static_cast<size_t>(k)] > 0.0)
      keep.push_back(k);
  if (keep.empty()) {
    int best = -1;
    for (int k = 0; k < K; ++k)
      if (colsum[static_cast<size_t>(k)] > 0.0 &&
          (best < 0 || params.lambda[static_cast<size_t>(k)] > params.lambda[static_cast<size_t>(best)]))
        best = k;
    keep.push_back(best < 0 ? 0 : best);
  }

  int Kp = static_cast<int>(keep.size());
  GmmParams out;
  out.K = Kp;
  out.D = D;
  out.lambda.resize(static_cast<size_t>(Kp));
  out.mu.resize(static_cast<size_t>(Kp) * static_cast<size_t>(D));
  out.sigma2.resize(static_cast<size_t>(Kp) * static_cast<size_t>(D));
  double lambda_total = 0.0;
  for (int j = 0; j < Kp; ++j) lambda_total += params.lambda[static_cast<size_t>(keep[static_cast<size_t>(j)])];
  for (int j = 0; j < Kp; ++j) {
    int k = keep[static_cast<size_t>(j)];
    out.lambda[static_cast<size_t>(j)] = params.lambda[static_cast<size_t>(k)] / lambda_total;
    std::copy_n(params.mu_row(k), D, out.mu_row(j));
    std::copy_n(params.sigma2_row(k), D, out.sigma2_row(j));
  }

  Responsibilities rout;
  rout.m = m;
  rout.K = Kp;
  rout.nu.assign(static_cast<size_t>(m) * static_cast<size_t>(Kp), 0.0);
  rout.nu_hat.assign(static_cast<size_t>(m) * static_cast<size_t>(Kp), 0.0);
  std::vector<double> new_colsum(static_cast<size_t>(Kp), 0.0);
  for (int i = 0; i < m; ++i) {
    double rowsum = 0.0;
    for (int j = 0; j < Kp; ++j) rowsum += resp.nu_at(i, keep[static_cast<size_t>(j)]);
    for (int j = 0; j < Kp; ++j) {
      double v = rowsum > 0.0 ? resp.nu_at(i, keep[static_cast<size_t>(j)]) / rowsum : 1.0 / Kp;
      rout.nu_at(i, j) = v;
      new_colsum[static_cast<size_t>(j)] += v;
    }
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < Kp; ++j)
      rout.nu_hat_at(i, j) =
          new_colsum[static_cast<size_t>(j)] > 0.0 ? rout.nu_at(i, j) / new_colsum[static_cast<size_t>(j)] : 0.0;
  return {std::move(out), std::move(rout)};
}

GmmParams fit_gmm(const Tensor& samples, int K, Rng& rng,
                  const FitOptions& opts, std::vector<double>* ll_trace) {
  check_samples(samples);
  int m = samples.extent(0), D = samples.extent(1);
  if (K < 1) throw std::invalid_argument("fit_gmm: K must be >= 1");
  if (m < K) throw std::invalid_argument("fit_gmm: insufficient samples (m < K)");
  if (!(opts.subsample_fraction > 0.0 && opts.subsample_fraction <= 1.0))
    throw std::invalid_argument("fit_gmm: subsample_fraction must be in (0, 1]");
  if (opts.em_iters < 0)
    throw std::invalid_argument("fit_gmm: em_iters must be >= 0");

  // Subsample used for seeding and EM; fraction 1 keeps the batch untouched
  // (and consumes no randomness). The subsample never shrinks below K.
  Tensor sub;
  const Tensor* fit_data = &samples;
  if (opts.subsample_fraction < 1.0) {
    int n_sub = static_cast<int>(std::ceil(opts.subsample_fraction * m));
    n_sub = std::clamp(n_sub, K, m);
    std::vector<int> idx = rng.sample_indices(m, n_sub);
    sub = Tensor({n_sub, D});
    for (int i = 0; i < n_sub; ++i)
      std::copy_n(samples.row(idx[static_cast<size_t>(i)]), D, sub.row(i));
    fit_data = &sub;
  }
  int n = fit_data->extent(0);

  std::vector<double> centers =
      kmeanspp_seed(*fit_data, K, rng, opts.seed_trials);
  int kmeans_iters = opts.kmeans_iters < 0 ? opts.em_iters : opts.kmeans_iters;
  kmeans_iterate(*fit_data, centers, K, kmeans_iters);

  // One-hot initialization from the final k-means assignment: lambda from
  // cluster fractions, mu/sigma2 from cluster moments. Empty clusters are
  // dropped up front.
  std::vector<int> assign(static_cast<size_t>(n));
  std::vector<int> counts(static_cast<size_t>(K), 0);
  for (int i = 0; i < n; ++i) {
    assign[static_cast<size_t>(i)] = nearest_center(fit_data->row(i), centers, K, D);
    ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
  }
  const SimdOps& ops = simd();
  std::vector<double> s1(static_cast<size_t>(K) * static_cast<size_t>(D), 0.0);
  std::vector<double> s2(static_cast<size_t>(K) * static_cast<size_t>(D), 0.0);
  for (int i = 0; i < n; ++i) {
    int k = assign[static_cast<size_t>(i)];
    ops.weighted_accum(fit_data->row(i), 1.0,
                       s1.data() + static_cast<size_t>(k) * static_cast<size_t>(D),
                       s2.data() + static_cast<size_t>(k) * static_cast<size_t>(D),
                       static_cast<size_t>(D));
  }
  GmmParams params;
  params.D = D;
  for (int k = 0; k < K; ++k) {
    if (counts[static_cast<size_t>(k)] == 0) continue;
    double inv = 1.0 / counts[static_cast<size_t>(k)];
    params.lambda.push_back(static_cast<double>(counts[static_cast<size_t>(k)]) / n);
    for (int d = 0; d < D; ++d) {
      double mean = s1[static_cast<size_t>(k) * static_cast<size_t>(D) + static_cast<size_t>(d)] * inv;
      double var = s2[static_cast<size_t>(k) * static_cast<size_t>(D) + static_cast<size_t>(d)] * inv - mean * mean;
      params.mu.push_back(mean);
      params.sigma2.push_back(std::max(var, kVarianceFloor));
    }
  }
  params.K = static_cast<int>(params.lambda.size());

  if (ll_trace != nullptr) ll_trace->push_back(log_likelihood(*fit_data, params));

  for (int it = 0; it < opts.em_iters; ++it) {
    Responsibilities resp = e_step(*fit_data, params);
    auto pruned = prune_components(params, resp, opts.prune_threshold);
    params = m_step(*fit_data, pruned.second);
    if (ll_trace != nullptr) ll_trace->push_back(log_likelihood(*fit_data, params));
  }
  return params;
}

}  // namespace mixnorm
