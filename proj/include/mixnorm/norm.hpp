#pragma once

#include <deque>
#include <vector>

#include "mixnorm/gmm.hpp"
#include "mixnorm/rng.hpp"
#include "mixnorm/tensor.hpp"

namespace mixnorm {

// Learnable per-channel scale/shift, initialized to the identity transform.
struct AffineParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  AffineParams() = default;
  explicit AffineParams(int C)
      : gamma(static_cast<size_t>(C), 1.0), beta(static_cast<size_t>(C), 0.0) {}
};

struct BnState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  long long batches_seen = 0;
  BnState() = default;
  explicit BnState(int C)
      : running_mean(static_cast<size_t>(C), 0.0),
        running_var(static_cast<size_t>(C), 1.0) {}
};

struct BnCache {
  Tensor xhat;
  std::vector<double> inv_std;
  std::vector<double> gamma;
};

struct BnResult {
  Tensor y;
  BnCache cache;
};

struct NormGrads {
  Tensor grad_x;
  std::vector<double> grad_gamma;
  std::vector<double> grad_beta;
};

// Train-mode batch normalization over (m, C) rows: per-channel batch mean and
// population variance, eps inside the square root, running statistics updated
// as (1 - momentum) * running + momentum * batch.
BnResult bn_forward_train(const Tensor& x, BnState& state,
                          const AffineParams& affine);

Tensor bn_forward_infer(const Tensor& x, const BnState& state,
                        const AffineParams& affine);

NormGrads bn_backward(const Tensor& grad_y, const BnCache& cache);

// FIFO of per-batch mixture fits (oldest first) combined at inference with
// geometric decay weights.
struct MnQueue {
  int capacity = 10;
  double zeta = 0.9;
  std::deque<GmmParams> entries;

  void push(const GmmParams& p) {
    entries.push_back(p);
    while (static_cast<int>(entries.size()) > capacity) entries.pop_front();
  }
};

// Decay weights tau_t = (1-zeta) * zeta^(n-t-1) / (1-zeta^n) for the current
// queue length n (t = 0 is the oldest entry); they sum to 1 for every n.
std::vector<double> queue_decay_weights(int length, double zeta);

// Where the learnable affine acts. per_component applies gamma/beta to each
// component-normalized activation before aggregation (the default; it makes
// K=1 coincide with batch normalization exactly). post_aggregate applies one
// affine after aggregation; the two coincide at K=1 and differ for K > 1 by
// beta * (sum_k nu_k/sqrt(lambda_k) - 1).
enum class AffineMode { per_component, post_aggregate };

struct MnConfig {
  int K = 3;
  int em_iters = 2;
  int kmeans_iters = -1;  // < 0: same as em_iters
  double subsample_fraction = 1.0;
  double prune_threshold = 0.01;
  int seed_trials = -1;
  double eps = 1e-5;
  AffineMode affine = AffineMode::per_component;
};

// Everything the backward pass and the ReLU composition need. Gradients are
// taken with nu (and hence lambda) frozen, flowing through the nu_hat-weighted
// moments mu = nu_hat^T x and sigma2 = nu_hat^T x^2 - mu^2.
struct MnCache {
  int m = 0;
  int C = 0;
  int K = 0;  // retained components after pruning
  AffineMode affine_mode = AffineMode::per_component;
  double eps = 1e-5;
  Responsibilities resp;
  std::vector<double> lambda;   // K, full-batch column means of nu
  std::vector<double> agg_w;    // m x K, nu_ik / sqrt(lambda_k)
  std::vector<double> mu;       // K x C
  std::vector<double> sigma2;   // K x C, unfloored batch moments
  std::vector<double> inv_std;  // K x C, 1/sqrt(sigma2 + eps)
  std::vector<double> xhat;     // m x K x C
  std::vector<double> gamma;
  std::vector<double> beta;
};

struct MnResult {
  Tensor y;
  MnCache cache;
};

// Train-mode mixture normalization: fit a GMM to the batch (seeding, k-means,
// EM on an optional subsample), take posteriors over the full batch, rebuild
// (lambda, mu, sigma2) from those posteriors, normalize per component, and
// aggregate with weights nu_k/sqrt(lambda_k). The rebuilt parameters are
// pushed onto the queue when one is supplied.
MnResult mn_forward_train(const Tensor& x, const MnConfig& cfg,
                          const AffineParams& affine, Rng& rng,
                          MnQueue* queue = nullptr);

// The differentiable part alone: recomputes moments and output from the given
// posteriors. Used by the backward pass's finite-difference oracle and by
// gradient checks (forward replays reuse the cached nu).
MnResult mn_forward_frozen(const Tensor& x, const Responsibilities& resp,
                           const std::vector<double>& lambda,
                           const AffineParams& affine, AffineMode mode,
                           double eps);

NormGrads mn_backward(const Tensor& grad_y, const MnCache& cache);

// How inference whitens each (entry, component) term. collapse_consistent
// scales by 1/sqrt(lambda_k) so that duplicated queue entries collapse and a
// length-1 queue reduces to the train-time transform; literal_tau additionally
// folds the decay weight into the whitening (the printed double-sum form),
// which scales duplicated entries by sum_t sqrt(tau_t) > 1.
enum class QueueWhitening { collapse_consistent, literal_tau };

Tensor mn_forward_infer(const Tensor& x, const MnQueue& queue,
                        const AffineParams& affine, double eps = 1e-5,
                        AffineMode mode = AffineMode::per_component,
                        QueueWhitening whitening = QueueWhitening::collapse_consistent);

// Exact ReLU composition sum_k (nu_k/sqrt(lambda_k)) * ReLU(z_k) alongside
// the sparse approximation ReLU(aggregate).
struct MnReluResult {
  Tensor exact;
  Tensor approx;
};

MnReluResult mn_relu(const MnCache& cache);

NormGrads mn_relu_backward(const Tensor& grad_y, const MnCache& cache);

}  // namespace mixnorm
