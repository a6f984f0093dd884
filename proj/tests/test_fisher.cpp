#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "helpers.hpp"
#include "mixnorm/fisher.hpp"
#include "mixnorm/gmm.hpp"

using mixnorm::e_step;
using mixnorm::fim_gaussian_mc;
using mixnorm::fisher_score_gaussian;
using mixnorm::fisher_vector_gaussian;
using mixnorm::fisher_vector_gmm;
using mixnorm::GmmParams;
using mixnorm::Rng;
using mixnorm::Tensor;

namespace {

double log_density(double x, double mu, double sigma) {
  double d = x - mu;
  return -std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi) -
         0.5 * d * d / (sigma * sigma);
}

}  // namespace

TEST_SUITE("fisher") {

TEST_CASE("score matches finite differences") {
  Rng rng(21);
  const double h = 1e-6;
  for (int trial = 0; trial < 25; ++trial) {
    double mu = rng.uniform(-2.0, 2.0);
    double sigma = rng.uniform(0.3, 3.0);
    double x = rng.normal(mu, sigma);
    auto score = fisher_score_gaussian({x}, {mu}, {sigma});
    double fd_mu =
        (log_density(x, mu + h, sigma) - log_density(x, mu - h, sigma)) / (2 * h);
    double fd_sigma =
        (log_density(x, mu, sigma + h) - log_density(x, mu, sigma - h)) / (2 * h);
    CHECK(mixtest::rel_err(score.d_mu[0], fd_mu) < 1e-6);
    CHECK(mixtest::rel_err(score.d_sigma[0], fd_sigma) < 1e-6);
  }
}

TEST_CASE("score at the mean") {
  auto score = fisher_score_gaussian({1.5}, {1.5}, {0.7});
  CHECK(score.d_mu[0] == doctest::Approx(0.0));
  CHECK(score.d_sigma[0] == doctest::Approx(-1.0 / 0.7).epsilon(1e-12));
}

TEST_CASE("fisher vector is the whitened score") {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> x, mu, sigma;
    for (int d = 0; d < 4; ++d) {
      mu.push_back(rng.uniform(-1.0, 1.0));
      sigma.push_back(rng.uniform(0.4, 2.0));
      x.push_back(rng.normal(mu.back(), sigma.back()));
    }
    auto score = fisher_score_gaussian(x, mu, sigma);
    auto fv = fisher_vector_gaussian(x, mu, sigma);
    for (int d = 0; d < 4; ++d) {
      size_t sd = static_cast<size_t>(d);
      CHECK(fv.g_mu[sd] ==
            doctest::Approx(sigma[sd] * score.d_mu[sd]).epsilon(1e-12));
      CHECK(fv.g_sigma[sd] ==
            doctest::Approx(sigma[sd] / std::sqrt(2.0) * score.d_sigma[sd])
                .epsilon(1e-12));
      double z = (x[sd] - mu[sd]) / sigma[sd];
      CHECK(fv.g_mu[sd] == doctest::Approx(z).epsilon(1e-12));
      CHECK(fv.g_sigma[sd] ==
            doctest::Approx((z * z - 1.0) / std::sqrt(2.0)).epsilon(1e-12));
    }
  }
}

TEST_CASE("mc information matrix approaches the closed form") {
  Rng rng(23);
  std::vector<double> mu{0.3, -0.7}, sigma{1.0, 2.0};
  auto fims = fim_gaussian_mc(mu, sigma, 200000, rng);
  REQUIRE(fims.size() == 2);
  for (int d = 0; d < 2; ++d) {
    size_t sd = static_cast<size_t>(d);
    double s2 = sigma[sd] * sigma[sd];
    CHECK(std::abs(fims[sd].m_mu_mu - 1.0 / s2) < 0.05 / s2);
    CHECK(std::abs(fims[sd].m_sigma_sigma - 2.0 / s2) < 0.1 / s2);
    CHECK(std::abs(fims[sd].m_mu_sigma) < 0.05);
  }
}

TEST_CASE("single-component mixture reduces to the Gaussian fisher vector") {
  Rng rng(24);
  GmmParams p;
  p.K = 1;
  p.D = 3;
  p.lambda = {1.0};
  p.mu = {0.5, -1.0, 2.0};
  p.sigma2 = {1.0, 0.25, 4.0};
  std::vector<double> x{0.1, -0.4, 3.0};
  auto blocks = fisher_vector_gmm(x, p);
  REQUIRE(blocks.size() == 1);
  std::vector<double> sigma;
  for (double v : p.sigma2) sigma.push_back(std::sqrt(v));
  auto plain = fisher_vector_gaussian(x, p.mu, sigma);
  for (int d = 0; d < 3; ++d) {
    size_t sd = static_cast<size_t>(d);
    CHECK(blocks[0].g_mu[sd] == doctest::Approx(plain.g_mu[sd]).epsilon(1e-12));
    CHECK(blocks[0].g_sigma[sd] ==
          doctest::Approx(plain.g_sigma[sd]).epsilon(1e-12));
  }
}

TEST_CASE("mixture fisher vector carries the posterior weight") {
  GmmParams p;
  p.K = 2;
  p.D = 1;
  p.lambda = {0.25, 0.75};
  p.mu = {-1.0, 1.5};
  p.sigma2 = {0.8, 1.2};
  double xv = 0.3;
  auto blocks = fisher_vector_gmm({xv}, p);
  REQUIRE(blocks.size() == 2);

  Tensor x = Tensor::from({1, 1}, {xv});
  auto resp = e_step(x, p);
  for (int k = 0; k < 2; ++k) {
    size_t sk = static_cast<size_t>(k);
    double nu = resp.nu_at(0, k);
    double w = nu / std::sqrt(p.lambda[sk]);
    double sigma = std::sqrt(p.sigma2[sk]);
    double z = (xv - p.mu[sk]) / sigma;
    CHECK(blocks[sk].g_mu[0] == doctest::Approx(w * z).epsilon(1e-10));
    CHECK(blocks[sk].g_sigma[0] ==
          doctest::Approx(w * (z * z - 1.0) / std::sqrt(2.0)).epsilon(1e-10));
  }
}

TEST_CASE("dividing out the weight recovers the whitened residual") {
  Rng rng(25);
  GmmParams p;
  p.K = 3;
  p.D = 2;
  p.lambda = {0.2, 0.5, 0.3};
  p.mu = {-2, 0, 0, 1, 2, -1};
  p.sigma2 = {0.5, 1.0, 1.5, 0.75, 2.0, 0.6};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> xv{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
    auto blocks = fisher_vector_gmm(xv, p);
    Tensor x = Tensor::from({1, 2}, xv);
    auto resp = e_step(x, p);
    for (int k = 0; k < 3; ++k) {
      size_t sk = static_cast<size_t>(k);
      double nu = resp.nu_at(0, k);
      if (nu < 1e-12) continue;
      double w = nu / std::sqrt(p.lambda[sk]);
      for (int d = 0; d < 2; ++d) {
        size_t sd = static_cast<size_t>(d);
        double z = (xv[sd] - p.mu_row(k)[d]) / std::sqrt(p.sigma2_row(k)[d]);
        CHECK(mixtest::rel_err(blocks[sk].g_mu[sd] / w, z) < 1e-10);
      }
    }
  }
}

}  // TEST_SUITE
