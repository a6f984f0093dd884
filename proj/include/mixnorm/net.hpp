#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mixnorm/norm.hpp"
#include "mixnorm/rng.hpp"
#include "mixnorm/tensor.hpp"

namespace mixnorm {

enum class LayerKind { conv, dense, relu, maxpool, avgpool, bn, mn, mn_relu };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int channels = 0;  // conv out_channels / dense out_features
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  int window = 2;  // pool window (stride equals window)
  MnConfig mn_cfg;

  static LayerSpec conv(int out_channels, int kernel, int stride = 1,
                        int pad = 0);
  static LayerSpec dense(int out_features);
  static LayerSpec relu();
  static LayerSpec maxpool(int window = 2);
  static LayerSpec avgpool(int window = 2);
  static LayerSpec bn();
  static LayerSpec mn(const MnConfig& cfg = {});
  static LayerSpec mn_relu(const MnConfig& cfg = {});
};

// Reference and gemm-backed convolution (NCHW input, weight (Cout,Cin,K,K)).
// The two are cross-checked in the tests; the network uses the gemm path.
Tensor conv2d_direct(const Tensor& x, const Tensor& w,
                     const std::vector<double>& bias, int stride, int pad);
Tensor conv2d_im2col(const Tensor& x, const Tensor& w,
                     const std::vector<double>& bias, int stride, int pad);

struct Layer {
  LayerSpec spec;
  std::vector<int> in_shape;   // per-sample
  std::vector<int> out_shape;  // per-sample
  Tensor weight;               // conv (Cout,Cin,K,K); dense (in,out)
  std::vector<double> bias;
  AffineParams affine;  // bn / mn / mn_relu
  BnState bn;           // bn
  MnQueue queue;        // mn / mn_relu
};

struct LayerCache {
  Tensor input;
  Tensor col;               // conv: im2col matrix (N*Ho*Wo, Cin*K*K)
  std::vector<int> argmax;  // maxpool: flat input index per output element
  BnCache bn;
  MnCache mn;
};

struct ForwardResult {
  Tensor logits;
  std::vector<LayerCache> caches;
  std::vector<int> effective_k;  // retained K per mn/mn_relu layer, in order
};

struct BackwardResult {
  std::vector<std::vector<double>> grads;  // aligned with Network::params()
  Tensor grad_input;
};

struct ParamRef {
  std::string name;
  double* data = nullptr;
  size_t size = 0;
};

enum class OptimizerKind { sgd, sgd_momentum, nesterov, rmsprop };
enum class Schedule { constant, exponential, steps };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::rmsprop;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  Schedule schedule = Schedule::constant;
  double decay_rate = 0.93;  // exponential: lr0 * rate^floor(epoch/every)
  int decay_every = 2;
  std::vector<double> step_fractions;  // steps: divide by factor at each
  double step_factor = 10.0;           // floor(fraction*epochs) boundary
};

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const std::vector<ParamRef>& params);
  void set_epoch(int epoch, int total_epochs);
  double lr() const { return lr_; }
  void apply(const std::vector<std::vector<double>>& grads);

 private:
  OptimizerConfig cfg_;
  double lr_;
  std::vector<ParamRef> params_;
  std::vector<std::vector<double>> vel_;
  std::vector<std::vector<double>> sq_;
};

struct EvalPoint;

struct TrainOptions {
  int epochs = 10;
  int batch_size = 128;
  OptimizerConfig optimizer;
  // Called after each epoch's evaluation; lets callers snapshot mid-run.
  std::function<void(const EvalPoint&)> on_eval;
};

struct EvalPoint {
  long long step = 0;  // cumulative optimizer steps taken so far
  int epoch = 0;
  double train_loss = 0.0;  // mean batch loss over the epoch
  double test_loss = 0.0;
  double test_acc = 0.0;
  std::vector<int> effective_k;  // from the epoch's last batch
  double wall_seconds = 0.0;     // cumulative time in training steps
};

struct TrainResult {
  std::vector<EvalPoint> evals;
};

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

LossResult softmax_xent(const Tensor& logits, const std::vector<int>& labels);
double accuracy(const Tensor& logits, const std::vector<int>& labels);

class Network {
 public:
  // input_shape is per-sample: (C, H, W) or (F). Weights get He
  // initialization from a stream derived from seed.
  Network(std::vector<int> input_shape, std::vector<LayerSpec> specs,
          uint64_t seed);

  // Train-mode forward: fits mixtures, updates BN running statistics, pushes
  // queue entries, and returns the caches the backward pass consumes. step
  // seeds the per-layer mixture fits so runs are reproducible.
  ForwardResult forward(const Tensor& x, long long step);
  // Inference-mode forward (running statistics / queue replay), no caches.
  Tensor forward(const Tensor& x) const;
  // Inference-mode walk through the first `layers` layers; layers == 0 returns
  // the input. Used to capture pre-normalization activations.
  Tensor forward_to(const Tensor& x, int layers) const;
  // Differentiable replay: recomputes everything from x except that mn layers
  // reuse the posteriors cached in ref, matching what backward differentiates.
  Tensor forward_frozen(const Tensor& x, const ForwardResult& ref) const;

  BackwardResult backward(const ForwardResult& fwd,
                          const Tensor& grad_logits) const;

  double train_step(const Tensor& x, const std::vector<int>& labels,
                    Optimizer& opt, long long step,
                    std::vector<int>* effective_k = nullptr);

  TrainResult train(const Tensor& train_x, const std::vector<int>& train_y,
                    const Tensor& test_x, const std::vector<int>& test_y,
                    const TrainOptions& opts);

  // Mean loss and accuracy over a dataset, evaluated in mini-batches.
  double evaluate(const Tensor& x, const std::vector<int>& labels,
                  int batch_size, double* loss_out = nullptr) const;

  std::vector<ParamRef> params();
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<int>& input_shape() const { return input_shape_; }
  uint64_t seed() const { return seed_; }
  int num_outputs() const;

 private:
  std::vector<int> input_shape_;
  std::vector<Layer> layers_;
  uint64_t seed_;
};

// First cumulative step whose test accuracy reaches target, or -1.
long long steps_to_accuracy(const std::vector<EvalPoint>& evals, double target);

}  // namespace mixnorm
