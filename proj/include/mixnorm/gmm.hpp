#pragma once

#include <vector>

#include "mixnorm/rng.hpp"
#include "mixnorm/tensor.hpp"

namespace mixnorm {

// Lower bound applied to every diagonal variance so densities stay
// non-singular when a component collapses.
inline constexpr double kVarianceFloor = 1e-6;

// Diagonal-covariance Gaussian mixture. lambda lives on the probability
// simplex; mu and sigma2 are K x D row-major.
struct GmmParams {
  int K = 0;
  int D = 0;
  std::vector<double> lambda;
  std::vector<double> mu;
  std::vector<double> sigma2;

  const double* mu_row(int k) const { return mu.data() + static_cast<size_t>(k) * static_cast<size_t>(D); }
  const double* sigma2_row(int k) const { return sigma2.data() + static_cast<size_t>(k) * static_cast<size_t>(D); }
  double* mu_row(int k) { return mu.data() + static_cast<size_t>(k) * static_cast<size_t>(D); }
  double* sigma2_row(int k) { return sigma2.data() + static_cast<size_t>(k) * static_cast<size_t>(D); }
};

// Posterior matrix nu (rows sum to 1) and its column-normalized counterpart
// nu_hat (columns with positive mass sum to 1), both m x K row-major.
struct Responsibilities {
  int m = 0;
  int K = 0;
  std::vector<double> nu;
  std::vector<double> nu_hat;

  double& nu_at(int i, int k) { return nu[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)]; }
  double nu_at(int i, int k) const { return nu[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)]; }
  double& nu_hat_at(int i, int k) { return nu_hat[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)]; }
  double nu_hat_at(int i, int k) const { return nu_hat[static_cast<size_t>(i) * static_cast<size_t>(K) + static_cast<size_t>(k)]; }
};

// K-means++ seeding: D^2-weighted sampling, best of `trials` complete
// seedings by within-cluster sum of squares. trials < 0 selects the default
// ceil(2 + ln K). Returns K x D centers.
std::vector<double> kmeanspp_seed(const Tensor& samples, int K, Rng& rng,
                                  int trials = -1);

// Lloyd iterations; empty clusters are reseeded to the point farthest from
// its currently assigned center. Returns the final within-cluster sum of
// squares; wcss_trace (if given) receives one value per iteration.
double kmeans_iterate(const Tensor& samples, std::vector<double>& centers,
                      int K, int iters,
                      std::vector<double>* wcss_trace = nullptr);

// Posterior evaluation in log space with log-sum-exp.
Responsibilities e_step(const Tensor& samples, const GmmParams& params);

// Weighted-moment update; requires every column of nu to carry positive mass.
GmmParams m_step(const Tensor& samples, const Responsibilities& resp);

// Mean per-sample log density.
double log_likelihood(const Tensor& samples, const GmmParams& params);

// Drops components with lambda below threshold (always keeping at least the
// largest one), renormalizes lambda and the rows of nu, and rebuilds nu_hat.
std::pair<GmmParams, Responsibilities> prune_components(
    const GmmParams& params, const Responsibilities& resp, double threshold = 0.01);

struct FitOptions {
  int em_iters = 2;
  int kmeans_iters = -1;  // < 0: same as em_iters
  double subsample_fraction = 1.0;
  double prune_threshold = 0.01;
  int seed_trials = -1;  // < 0: ceil(2 + ln K)
};

// Full pipeline: subsample -> k-means++ seeding -> k-means -> one-hot init ->
// em_iters x (E-step, prune, M-step). ll_trace (if given) receives the mean
// log-likelihood on the fitting subsample after init and after each
// iteration. The "EM iter." count reported by experiment summaries is
// kmeans_iters + em_iters.
GmmParams fit_gmm(const Tensor& samples, int K, Rng& rng,
                  const FitOptions& opts = {},
                  std::vector<double>* ll_trace = nullptr);

}  // namespace mixnorm
