#pragma once

#include <vector>

#include "mixnorm/gmm.hpp"
#include "mixnorm/rng.hpp"

namespace mixnorm {

// Fisher vector blocks for a diagonal Gaussian (or, per component, a GMM):
// g_mu is the mean block, g_sigma the standard-deviation block.
struct FisherVec {
  std::vector<double> g_mu;
  std::vector<double> g_sigma;
};

// Gradient of the log-density of N(mu, diag sigma^2) with respect to (mu,
// sigma), stacked per dimension: [(x-mu)/sigma^2; -1/sigma + (x-mu)^2/sigma^3].
struct FisherScore {
  std::vector<double> d_mu;
  std::vector<double> d_sigma;
};

FisherScore fisher_score_gaussian(const std::vector<double>& x,
                                  const std::vector<double>& mu,
                                  const std::vector<double>& sigma);

// Whitened score: g_mu = (x-mu)/sigma, g_sigma = (-1 + (x-mu)^2/sigma^2)/sqrt(2),
// i.e. L * score with L = diag(sigma, sigma/sqrt(2)).
FisherVec fisher_vector_gaussian(const std::vector<double>& x,
                                 const std::vector<double>& mu,
                                 const std::vector<double>& sigma);

// Monte-Carlo estimate of the per-dimension 2x2 Fisher information matrix
// E[score score^T] under the model; closed form is diag(1/sigma^2, 2/sigma^2).
struct Fim2x2 {
  double m_mu_mu = 0.0;
  double m_mu_sigma = 0.0;
  double m_sigma_sigma = 0.0;
};

std::vector<Fim2x2> fim_gaussian_mc(const std::vector<double>& mu,
                                    const std::vector<double>& sigma,
                                    long long n_samples, Rng& rng);

// Per-component GMM Fisher vector: block k is
// (nu_k(x)/sqrt(lambda_k)) * [(x-mu_k)/sigma_k; (-1 + (x-mu_k)^2/sigma_k^2)/sqrt(2)].
std::vector<FisherVec> fisher_vector_gmm(const std::vector<double>& x,
                                         const GmmParams& params);

}  // namespace mixnorm
