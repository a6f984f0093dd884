#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "helpers.hpp"
#include "mixnorm/gmm.hpp"
#include "mixnorm/norm.hpp"

using mixnorm::AffineMode;
using mixnorm::AffineParams;
using mixnorm::bn_backward;
using mixnorm::bn_forward_train;
using mixnorm::BnState;
using mixnorm::e_step;
using mixnorm::GmmParams;
using mixnorm::mn_backward;
using mixnorm::mn_forward_frozen;
using mixnorm::mn_forward_infer;
using mixnorm::mn_forward_train;
using mixnorm::mn_relu;
using mixnorm::mn_relu_backward;
using mixnorm::MnConfig;
using mixnorm::MnQueue;
using mixnorm::queue_decay_weights;
using mixnorm::QueueWhitening;
using mixnorm::Rng;
using mixnorm::Tensor;

namespace {

// Batch drawn from well-separated per-channel cluster means.
Tensor clustered_batch(int m, int C, int clusters, Rng& rng) {
  Tensor x({m, C});
  for (int i = 0; i < m; ++i) {
    int g = i % clusters;
    for (int c = 0; c < C; ++c)
      x(i, c) = rng.normal(8.0 * g + 0.5 * c, 0.6);
  }
  return x;
}

GmmParams toy_params() {
  GmmParams p;
  p.K = 2;
  p.D = 2;
  p.lambda = {0.4, 0.6};
  p.mu = {-1.0, 0.5, 2.0, -0.5};
  p.sigma2 = {0.5, 1.0, 1.5, 0.8};
  return p;
}

}  // namespace

TEST_SUITE("norm_mn") {

TEST_CASE("decay weights sum to one and decay geometrically") {
  for (int n = 1; n <= 10; ++n) {
    auto tau = queue_decay_weights(n, 0.9);
    REQUIRE(static_cast<int>(tau.size()) == n);
    double s = 0.0;
    for (double t : tau) s += t;
    CHECK(std::abs(s - 1.0) < 1e-15);
    for (int t = 0; t + 1 < n; ++t)
      CHECK(tau[static_cast<size_t>(t) + 1] / tau[static_cast<size_t>(t)] ==
            doctest::Approx(1.0 / 0.9).epsilon(1e-12));
  }
  auto one = queue_decay_weights(1, 0.9);
  CHECK(one[0] == 1.0);
  auto two = queue_decay_weights(2, 0.9);
  CHECK(two[0] == doctest::Approx(9.0 / 19.0).epsilon(1e-14));
  CHECK(two[1] == doctest::Approx(10.0 / 19.0).epsilon(1e-14));

  CHECK_THROWS_AS(queue_decay_weights(0, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(queue_decay_weights(3, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(queue_decay_weights(3, 1.0), std::invalid_argument);
}

TEST_CASE("single-component mixture equals batch normalization") {
  Rng data_rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    int m = 4 + data_rng.uniform_int(32);
    int C = 1 + data_rng.uniform_int(6);
    Tensor x = mixtest::random_normal({m, C}, data_rng, 1.0, 2.0);
    AffineParams affine(C);
    for (int c = 0; c < C; ++c) {
      affine.gamma[static_cast<size_t>(c)] = data_rng.uniform(0.5, 1.5);
      affine.beta[static_cast<size_t>(c)] = data_rng.uniform(-1.0, 1.0);
    }

    BnState state(C);
    auto bn = bn_forward_train(x, state, affine);

    MnConfig cfg;
    cfg.K = 1;
    Rng fit_rng(100 + static_cast<uint64_t>(trial));
    auto mn = mn_forward_train(x, cfg, affine, fit_rng);

    CHECK(mixtest::max_abs_diff(bn.y, mn.y) < 1e-12);

    Tensor g = mixtest::random_uniform({m, C}, data_rng);
    auto gb = bn_backward(g, bn.cache);
    auto gm = mn_backward(g, mn.cache);
    CHECK(mixtest::max_abs_diff(gb.grad_x, gm.grad_x) < 1e-12);
    CHECK(mixtest::max_abs_diff(gb.grad_gamma, gm.grad_gamma) < 1e-12);
    CHECK(mixtest::max_abs_diff(gb.grad_beta, gm.grad_beta) < 1e-12);
  }
}

TEST_CASE("component activations are standardized under their posteriors") {
  Rng rng(42);
  Tensor x = clustered_batch(96, 4, 3, rng);
  MnConfig cfg;
  cfg.K = 3;
  Rng fit_rng(43);
  auto res = mn_forward_train(x, cfg, AffineParams(4), fit_rng);
  const auto& cache = res.cache;
  int K = cache.K, C = cache.C, m = cache.m;
  REQUIRE(K >= 1);
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c) {
      double mean = 0.0, sq = 0.0;
      for (int i = 0; i < m; ++i) {
        double w = cache.resp.nu_hat_at(i, k);
        double xh = cache.xhat[(static_cast<size_t>(i) * static_cast<size_t>(K) +
                                static_cast<size_t>(k)) *
                                   static_cast<size_t>(C) +
                               static_cast<size_t>(c)];
        mean += w * xh;
        sq += w * xh * xh;
      }
      double s2 = cache.sigma2[static_cast<size_t>(k) * static_cast<size_t>(C) +
                               static_cast<size_t>(c)];
      double floor = s2 / (s2 + cache.eps);
      CHECK(std::abs(mean) < 1e-10);
      CHECK(sq >= floor - 1e-10);
      CHECK(sq <= 1.0);
    }
}

TEST_CASE("m below K is rejected") {
  Tensor x({2, 3}, 0.0);
  MnConfig cfg;
  cfg.K = 3;
  Rng rng(44);
  CHECK_THROWS_AS(mn_forward_train(x, cfg, AffineParams(3), rng),
                  std::invalid_argument);
}

TEST_CASE("forward is deterministic for a fixed stream") {
  Rng data_rng(45);
  Tensor x = clustered_batch(64, 3, 2, data_rng);
  MnConfig cfg;
  cfg.K = 2;
  AffineParams affine(3);
  Rng r1(46), r2(46);
  auto a = mn_forward_train(x, cfg, affine, r1);
  auto b = mn_forward_train(x, cfg, affine, r2);
  CHECK(mixtest::max_abs_diff(a.y, b.y) == 0.0);
}

TEST_CASE("affine modes differ by the aggregate weight excess") {
  Rng data_rng(47);
  Tensor x = clustered_batch(48, 3, 2, data_rng);
  AffineParams affine(3);
  affine.gamma = {1.3, 0.7, 1.0};
  affine.beta = {0.4, -0.6, 0.2};

  MnConfig comp;
  comp.K = 2;
  comp.affine = AffineMode::per_component;
  Rng r1(48);
  auto a = mn_forward_train(x, comp, affine, r1);

  MnConfig post = comp;
  post.affine = AffineMode::post_aggregate;
  Rng r2(48);
  auto b = mn_forward_train(x, post, affine, r2);

  int K = a.cache.K;
  REQUIRE(K == b.cache.K);
  for (int i = 0; i < 48; ++i) {
    double wsum = 0.0;
    for (int k = 0; k < K; ++k)
      wsum += a.cache.agg_w[static_cast<size_t>(i) * static_cast<size_t>(K) +
                            static_cast<size_t>(k)];
    for (int c = 0; c < 3; ++c) {
      double want = affine.beta[static_cast<size_t>(c)] * (wsum - 1.0);
      CHECK(a.y(i, c) - b.y(i, c) == doctest::Approx(want).epsilon(1e-10));
    }
  }
}

TEST_CASE("backward matches finite differences") {
  Rng data_rng(49);
  for (AffineMode mode :
       {AffineMode::per_component, AffineMode::post_aggregate}) {
    int m = 24, C = 3;
    Tensor x = clustered_batch(m, C, 2, data_rng);
    AffineParams affine(C);
    affine.gamma = {1.1, 0.9, -0.6};
    affine.beta = {0.2, -0.1, 0.3};

    MnConfig cfg;
    cfg.K = 2;
    cfg.affine = mode;
    Rng fit_rng(50);
    auto fwd = mn_forward_train(x, cfg, affine, fit_rng);
    Tensor w = mixtest::random_uniform({m, C}, data_rng);
    auto grads = mn_backward(w, fwd.cache);

    auto loss = [&](const Tensor& input, const AffineParams& a) {
      auto res = mn_forward_frozen(input, fwd.cache.resp, fwd.cache.lambda, a,
                                   mode, cfg.eps);
      double v = 0.0;
      for (int i = 0; i < res.y.size(); ++i) v += w.flat(i) * res.y.flat(i);
      return v;
    };

    const double h = 1e-6;
    for (int i = 0; i < x.size(); ++i) {
      Tensor xp = x, xm = x;
      xp.flat(i) += h;
      xm.flat(i) -= h;
      double fd = (loss(xp, affine) - loss(xm, affine)) / (2 * h);
      CHECK(mixtest::rel_err(grads.grad_x.flat(i), fd) < 1e-6);
    }
    for (int c = 0; c < C; ++c) {
      size_t sc = static_cast<size_t>(c);
      AffineParams ap = affine, am = affine;
      ap.gamma[sc] += h;
      am.gamma[sc] -= h;
      double fd = (loss(x, ap) - loss(x, am)) / (2 * h);
      CHECK(mixtest::rel_err(grads.grad_gamma[sc], fd) < 1e-6);

      AffineParams bp = affine, bm = affine;
      bp.beta[sc] += h;
      bm.beta[sc] -= h;
      fd = (loss(x, bp) - loss(x, bm)) / (2 * h);
      CHECK(mixtest::rel_err(grads.grad_beta[sc], fd) < 1e-6);
    }
  }
}

TEST_CASE("relu composition backward matches finite differences") {
  Rng data_rng(51);
  for (AffineMode mode :
       {AffineMode::per_component, AffineMode::post_aggregate}) {
    int m = 20, C = 3;
    Tensor x = clustered_batch(m, C, 2, data_rng);
    AffineParams affine(C);
    affine.gamma = {0.9, 1.2, 0.8};
    affine.beta = {0.1, -0.2, 0.15};

    MnConfig cfg;
    cfg.K = 2;
    cfg.affine = mode;
    Rng fit_rng(52);
    auto fwd = mn_forward_train(x, cfg, affine, fit_rng);
    Tensor w = mixtest::random_uniform({m, C}, data_rng);
    auto grads = mn_relu_backward(w, fwd.cache);

    auto loss = [&](const Tensor& input, const AffineParams& a) {
      auto res = mn_forward_frozen(input, fwd.cache.resp, fwd.cache.lambda, a,
                                   mode, cfg.eps);
      auto act = mn_relu(res.cache);
      double v = 0.0;
      for (int i = 0; i < act.exact.size(); ++i)
        v += w.flat(i) * act.exact.flat(i);
      return v;
    };

    const double h = 1e-6;
    for (int i = 0; i < x.size(); ++i) {
      Tensor xp = x, xm = x;
      xp.flat(i) += h;
      xm.flat(i) -= h;
      double fd = (loss(xp, affine) - loss(xm, affine)) / (2 * h);
      CHECK(mixtest::rel_err(grads.grad_x.flat(i), fd) < 1e-6);
    }
    for (int c = 0; c < C; ++c) {
      size_t sc = static_cast<size_t>(c);
      AffineParams ap = affine, am = affine;
      ap.gamma[sc] += h;
      am.gamma[sc] -= h;
      double fd = (loss(x, ap) - loss(x, am)) / (2 * h);
      CHECK(mixtest::rel_err(grads.grad_gamma[sc], fd) < 1e-6);

      AffineParams bp = affine, bm = affine;
      bp.beta[sc] += h;
      bm.beta[sc] -= h;
      fd = (loss(x, bp) - loss(x, bm)) / (2 * h);
      CHECK(mixtest::rel_err(grads.grad_beta[sc], fd) < 1e-6);
    }
  }
}

TEST_CASE("relu composition identities") {
  Rng data_rng(53);
  int m = 32, C = 2;
  Tensor x = clustered_batch(m, C, 2, data_rng);

  MnConfig cfg;
  cfg.K = 2;
  AffineParams shifted(C);
  shifted.beta = {10.0, 10.0};  // pushes every pre-activation positive
  Rng r1(54);
  auto pos = mn_forward_train(x, cfg, shifted, r1);
  auto act = mn_relu(pos.cache);
  CHECK(mixtest::max_abs_diff(act.exact, act.approx) < 1e-12);
  CHECK(mixtest::max_abs_diff(act.approx, pos.y) < 1e-12);

  AffineParams affine(C);
  Rng r2(54);
  auto mixed = mn_forward_train(x, cfg, affine, r2);
  auto act2 = mn_relu(mixed.cache);
  for (int i = 0; i < act2.approx.size(); ++i) {
    double ref = mixed.y.flat(i) > 0.0 ? mixed.y.flat(i) : 0.0;
    CHECK(act2.approx.flat(i) == doctest::Approx(ref).epsilon(1e-12));
    CHECK(act2.exact.flat(i) >= -1e-12);
  }
}

TEST_CASE("length-one queue matches the stored-parameter transform") {
  Rng rng(55);
  GmmParams p = toy_params();
  MnQueue queue;
  queue.push(p);

  AffineParams affine(2);
  affine.gamma = {1.4, 0.6};
  affine.beta = {-0.2, 0.3};
  Tensor x = mixtest::random_normal({12, 2}, rng, 0.5, 1.5);
  Tensor y = mn_forward_infer(x, queue, affine, 1e-5);

  auto resp = e_step(x, p);
  for (int i = 0; i < 12; ++i)
    for (int c = 0; c < 2; ++c) {
      double want = 0.0;
      for (int k = 0; k < 2; ++k) {
        size_t sk = static_cast<size_t>(k);
        double nu = resp.nu_at(i, k);
        double xhat = (x(i, c) - p.mu_row(k)[c]) /
                      std::sqrt(p.sigma2_row(k)[c] + 1e-5);
        want += nu / std::sqrt(p.lambda[sk]) *
                (affine.gamma[static_cast<size_t>(c)] * xhat +
                 affine.beta[static_cast<size_t>(c)]);
      }
      CHECK(y(i, c) == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("duplicated queue entries collapse") {
  Rng rng(56);
  GmmParams p = toy_params();
  AffineParams affine(2);
  Tensor x = mixtest::random_normal({16, 2}, rng);

  MnQueue single;
  single.push(p);
  Tensor base = mn_forward_infer(x, single, affine);

  for (int copies : {2, 3, 5}) {
    MnQueue dup;
    for (int t = 0; t < copies; ++t) dup.push(p);
    Tensor y = mn_forward_infer(x, dup, affine);
    CHECK(mixtest::max_abs_diff(base, y) < 1e-12);
  }

  MnQueue dup3;
  for (int t = 0; t < 3; ++t) dup3.push(p);
  Tensor literal = mn_forward_infer(x, dup3, affine, 1e-5,
                                    AffineMode::per_component,
                                    QueueWhitening::literal_tau);
  CHECK(mixtest::max_abs_diff(base, literal) > 1e-3);
}

TEST_CASE("queue evicts oldest beyond capacity") {
  MnQueue q;
  q.capacity = 3;
  for (int t = 0; t < 5; ++t) {
    GmmParams p = toy_params();
    p.mu[0] = t;
    q.push(p);
  }
  REQUIRE(q.entries.size() == 3);
  CHECK(q.entries.front().mu[0] == 2.0);
  CHECK(q.entries.back().mu[0] == 4.0);
}

TEST_CASE("inference rejects bad queues") {
  AffineParams affine(2);
  Tensor x({4, 2}, 0.0);
  MnQueue empty;
  CHECK_THROWS_AS(mn_forward_infer(x, empty, affine), std::runtime_error);

  MnQueue wrong;
  GmmParams p = toy_params();  // D = 2
  wrong.push(p);
  Tensor x3({4, 3}, 0.0);
  AffineParams affine3(3);
  CHECK_THROWS_AS(mn_forward_infer(x3, wrong, affine3), std::invalid_argument);
}

TEST_CASE("custom eps reaches the cache") {
  Rng data_rng(57);
  Tensor x = clustered_batch(32, 2, 2, data_rng);
  MnConfig cfg;
  cfg.K = 2;
  cfg.eps = 0.01;
  Rng fit_rng(58);
  auto res = mn_forward_train(x, cfg, AffineParams(2), fit_rng);
  CHECK(res.cache.eps == 0.01);
  int K = res.cache.K;
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < 2; ++c) {
      size_t idx = static_cast<size_t>(k) * 2 + static_cast<size_t>(c);
      CHECK(res.cache.inv_std[idx] ==
            doctest::Approx(1.0 / std::sqrt(res.cache.sigma2[idx] + 0.01))
                .epsilon(1e-12));
    }
}

TEST_CASE("train pushes floored parameters onto the queue") {
  Rng data_rng(59);
  Tensor x = clustered_batch(40, 2, 2, data_rng);
  MnConfig cfg;
  cfg.K = 2;
  MnQueue queue;
  Rng fit_rng(60);
  auto res = mn_forward_train(x, cfg, AffineParams(2), fit_rng, &queue);
  REQUIRE(queue.entries.size() == 1);
  const GmmParams& p = queue.entries.front();
  CHECK(p.K == res.cache.K);
  for (double v : p.sigma2) CHECK(v >= mixnorm::kVarianceFloor);
  double lam = 0.0;
  for (double l : p.lambda) lam += l;
  CHECK(lam == doctest::Approx(1.0).epsilon(1e-12));
}

}  // TEST_SUITE
