#include "mixnorm/fisher.hpp"

#include <cmath>
#include <stdexcept>

namespace mixnorm {

namespace {

void check_dims(const std::vector<double>& x, const std::vector<double>& mu,
                const std::vector<double>& sigma) {
  if (x.size() != mu.size() || x.size() != sigma.size())
    throw std::invalid_argument("fisher: x, mu, sigma sizes differ");
  for (double s : sigma)
    if (!(s > 0.0))
      throw std::invalid_argument("fisher: sigma must be positive");
}

}  // namespace

FisherScore fisher_score_gaussian(const std::vector<double>& x,
                                  const std::vector<double>& mu,
                                  const std::vector<double>& sigma) {
  check_dims(x, mu, sigma);
  size_t d = x.size();
  FisherScore s;
  s.d_mu.resize(d);
  s.d_sigma.resize(d);
  for (size_t i = 0; i < d; ++i) {
    double diff = x[i] - mu[i];
    double s2 = sigma[i] * sigma[i];
    s.d_mu[i] = diff / s2;
    s.d_sigma[i] = -1.0 / sigma[i] + diff * diff / (s2 * sigma[i]);
  }
  return s;
}

FisherVec fisher_vector_gaussian(const std::vector<double>& x,
                                 const std::vector<double>& mu,
                                 const std::vector<double>& sigma) {
  check_dims(x, mu, sigma);
  size_t d = x.size();
  FisherVec v;
  v.g_mu.resize(d);
  v.g_sigma.resize(d);
  double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (size_t i = 0; i < d; ++i) {
    double z = (x[i] - mu[i]) / sigma[i];
    v.g_mu[i] = z;
    v.g_sigma[i] = inv_sqrt2 * (z * z - 1.0);
  }
  return v;
}

std::vector<Fim2x2> fim_gaussian_mc(const std::vector<double>& mu,
                                    const std::vector<double>& sigma,
                                    long long n_samples, Rng& rng) {
  if (mu.size() != sigma.size())
    throw std::invalid_argument("fim_gaussian_mc: mu, sigma sizes differ");
  if (n_samples < 1)
    throw std::invalid_argument("fim_gaussian_mc: n_samples must be >= 1");
  size_t d = mu.size();
  std::vector<Fim2x2> acc(d);
  std::vector<double> x(d);
  for (long long s = 0; s < n_samples; ++s) {
    for (size_t i = 0; i < d; ++i) x[i] = rng.normal(mu[i], sigma[i]);
    FisherScore score = fisher_score_gaussian(x, mu, sigma);
    for (size_t i = 0; i < d; ++i) {
      acc[i].m_mu_mu += score.d_mu[i] * score.d_mu[i];
      acc[i].m_mu_sigma += score.d_mu[i] * score.d_sigma[i];
      acc[i].m_sigma_sigma += score.d_sigma[i] * score.d_sigma[i];
    }
  }
  double inv = 1.0 / static_cast<double>(n_samples);
  for (auto& f : acc) {
    f.m_mu_mu *= inv;
    f.m_mu_sigma *= inv;
    f.m_sigma_sigma *= inv;
  }
  return acc;
}

std::vector<FisherVec> fisher_vector_gmm(const std::vector<double>& x,
                                         const GmmParams& params) {
  if (static_cast<int>(x.size()) != params.D)
    throw std::invalid_argument("fisher_vector_gmm: dimension mismatch");
  Tensor one = Tensor::from({1, params.D}, x);
  Responsibilities resp = e_step(one, params);

  std::vector<FisherVec> out(static_cast<size_t>(params.K));
  double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (int k = 0; k < params.K; ++k) {
    double w = params.lambda[static_cast<size_t>(k)] > 0.0
                   ? resp.nu_at(0, k) / std::sqrt(params.lambda[static_cast<size_t>(k)])
                   : 0.0;
    FisherVec& v = out[static_cast<size_t>(k)];
    v.g_mu.resize(static_cast<size_t>(params.D));
    v.g_sigma.resize(static_cast<size_t>(params.D));
    for (int d = 0; d < params.D; ++d) {
      double sd = std::sqrt(params.sigma2_row(k)[d]);
      double z = (x[static_cast<size_t>(d)] - params.mu_row(k)[d]) / sd;
      v.g_mu[static_cast<size_t>(d)] = w * z;
      v.g_sigma[static_cast<size_t>(d)] = w * inv_sqrt2 * (z * z - 1.0);
    }
  }
  return out;
}

}  // namespace mixnorm
