#include "mixnorm/net.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mixnorm/simd.hpp"

namespace mixnorm {

LayerSpec LayerSpec::conv(int out_channels, int kernel, int stride, int pad) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::dense(int out_features) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.channels = out_features;
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::relu;
  return s;
}

LayerSpec LayerSpec::maxpool(int window) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.window = window;
  return s;
}

LayerSpec LayerSpec::avgpool(int window) {
  LayerSpec s;
  s.kind = LayerKind::avgpool;
  s.window = window;
  return s;
}

LayerSpec LayerSpec::bn() {
  LayerSpec s;
  s.kind = LayerKind::bn;
  return s;
}

LayerSpec LayerSpec::mn(const MnConfig& cfg) {
  LayerSpec s;
  s.kind = LayerKind::mn;
  s.mn_cfg = cfg;
  return s;
}

LayerSpec LayerSpec::mn_relu(const MnConfig& cfg) {
  LayerSpec s;
  s.kind = LayerKind::mn_relu;
  s.mn_cfg = cfg;
  return s;
}

namespace {

int shape_size(const std::vector<int>& s) {
  int n = 1;
  for (int e : s) n *= e;
  return n;
}

std::vector<int> with_batch(int N, const std::vector<int>& per_sample) {
  std::vector<int> s;
  s.reserve(per_sample.size() + 1);
  s.push_back(N);
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  return Tensor::from(std::move(shape),
                      std::vector<double>(x.data(), x.data() + x.size()));
}

void transpose(int M, int N, const double* a, double* at) {
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j)
      at[static_cast<size_t>(j) * static_cast<size_t>(M) + static_cast<size_t>(i)] =
          a[static_cast<size_t>(i) * static_cast<size_t>(N) + static_cast<size_t>(j)];
}

int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

void conv_check(const Tensor& x, const Tensor& w,
                const std::vector<double>& bias, int stride, int pad) {
  if (x.dim() != 4) throw std::invalid_argument("conv: input must be 4-D");
  if (w.dim() != 4) throw std::invalid_argument("conv: weight must be 4-D");
  if (w.extent(1) != x.extent(1))
    throw std::invalid_argument("conv: channel mismatch");
  if (w.extent(2) != w.extent(3))
    throw std::invalid_argument("conv: kernel must be square");
  if (bias.size() != static_cast<size_t>(w.extent(0)))
    throw std::invalid_argument("conv: bias size mismatch");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv: bad geometry");
  int k = w.extent(2);
  if (conv_out_extent(x.extent(2), k, stride, pad) < 1 ||
      conv_out_extent(x.extent(3), k, stride, pad) < 1)
    throw std::invalid_argument("conv: output collapses to nothing");
}

// (N*Ho*Wo, Cin*K*K) patch matrix; out-of-range taps read as zero.
Tensor im2col(const Tensor& x, int k, int stride, int pad, int Ho, int Wo) {
  int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  int Q = C * k * k;
  Tensor col({N * Ho * Wo, Q});
  for (int n = 0; n < N; ++n)
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        double* crow = col.row((n * Ho + ho) * Wo + wo);
        int q = 0;
        for (int c = 0; c < C; ++c)
          for (int kh = 0; kh < k; ++kh) {
            int hi = ho * stride - pad + kh;
            if (hi < 0 || hi >= H) {
              for (int kw = 0; kw < k; ++kw) crow[q++] = 0.0;
              continue;
            }
            for (int kw = 0; kw < k; ++kw) {
              int wi = wo * stride - pad + kw;
              crow[q++] = (wi >= 0 && wi < W) ? x(n, c, hi, wi) : 0.0;
            }
          }
      }
  return col;
}

void col2im(const Tensor& gcol, int k, int stride, int pad, int Ho, int Wo,
            Tensor& gx) {
  int N = gx.extent(0), C = gx.extent(1), H = gx.extent(2), W = gx.extent(3);
  for (int n = 0; n < N; ++n)
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        const double* grow = gcol.row((n * Ho + ho) * Wo + wo);
        int q = 0;
        for (int c = 0; c < C; ++c)
          for (int kh = 0; kh < k; ++kh) {
            int hi = ho * stride - pad + kh;
            if (hi < 0 || hi >= H) {
              q += k;
              continue;
            }
            for (int kw = 0; kw < k; ++kw, ++q) {
              int wi = wo * stride - pad + kw;
              if (wi >= 0 && wi < W) gx(n, c, hi, wi) += grow[q];
            }
          }
      }
}

Tensor conv_gemm(const Tensor& x, const Tensor& w,
                 const std::vector<double>& bias, int stride, int pad,
                 Tensor* col_out) {
  conv_check(x, w, bias, stride, pad);
  int N = x.extent(0), Cout = w.extent(0), k = w.extent(2);
  int Ho = conv_out_extent(x.extent(2), k, stride, pad);
  int Wo = conv_out_extent(x.extent(3), k, stride, pad);
  int Q = x.extent(1) * k * k;
  int R = N * Ho * Wo;

  Tensor col = im2col(x, k, stride, pad, Ho, Wo);
  std::vector<double> wt(static_cast<size_t>(Q) * static_cast<size_t>(Cout));
  transpose(Cout, Q, w.data(), wt.data());
  Tensor ymat({R, Cout});
  gemm(R, Cout, Q, col.data(), wt.data(), ymat.data());

  Tensor y({N, Cout, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        const double* yr = ymat.row((n * Ho + ho) * Wo + wo);
        for (int co = 0; co < Cout; ++co)
          y(n, co, ho, wo) = yr[co] + bias[static_cast<size_t>(co)];
      }
  if (col_out != nullptr) *col_out = std::move(col);
  return y;
}

Tensor maxpool_fwd(const Tensor& x, int w, std::vector<int>* argmax) {
  int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  int Ho = H / w, Wo = W / w;
  Tensor y({N, C, Ho, Wo});
  argmax->assign(static_cast<size_t>(y.size()), -1);
  int oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int bi = -1;
          for (int kh = 0; kh < w; ++kh)
            for (int kw = 0; kw < w; ++kw) {
              int idx = ((n * C + c) * H + ho * w + kh) * W + wo * w + kw;
              double v = x.flat(idx);
              if (v > best) {
                best = v;
                bi = idx;
              }
            }
          y.flat(oi) = best;
          (*argmax)[static_cast<size_t>(oi)] = bi;
        }
  return y;
}

Tensor avgpool_fwd(const Tensor& x, int w) {
  int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  int Ho = H / w, Wo = W / w;
  double inv = 1.0 / (w * w);
  Tensor y({N, C, Ho, Wo});
  int oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo, ++oi) {
          double acc = 0.0;
          for (int kh = 0; kh < w; ++kh)
            for (int kw = 0; kw < w; ++kw)
              acc += x(n, c, ho * w + kh, wo * w + kw);
          y.flat(oi) = acc * inv;
        }
  return y;
}

// Present an activation tensor as (m, C) rows for the normalization cores.
struct RowsView {
  Tensor rows;
  bool spatial = false;
  int N = 0, C = 0, H = 1, W = 1;
};

RowsView to_rows(const Tensor& x) {
  RowsView v;
  if (x.dim() == 4) {
    v.spatial = true;
    v.N = x.extent(0);
    v.C = x.extent(1);
    v.H = x.extent(2);
    v.W = x.extent(3);
    v.rows = flatten_batch(x);
  } else if (x.dim() == 2) {
    v.N = x.extent(0);
    v.C = x.extent(1);
    v.rows = x;
  } else {
    throw std::invalid_argument("norm layer: input must be 2-D or 4-D");
  }
  return v;
}

Tensor from_rows(Tensor rows, const RowsView& v) {
  if (v.spatial) return unflatten_batch(rows, v.N, v.C, v.H, v.W);
  return rows;
}

Tensor dense_fwd(const Tensor& x, const Layer& layer) {
  int N = x.extent(0);
  int in = layer.weight.extent(0), out = layer.weight.extent(1);
  Tensor x2 = x.dim() == 2 ? x : reshape(x, {N, in});
  if (x2.extent(1) != in)
    throw std::invalid_argument("dense: input width mismatch");
  Tensor y({N, out});
  gemm(N, out, in, x2.data(), layer.weight.data(), y.data());
  const SimdOps& ops = simd();
  for (int i = 0; i < N; ++i)
    ops.axpy(1.0, layer.bias.data(), y.row(i), static_cast<size_t>(out));
  return y;
}

Tensor relu_fwd(const Tensor& x) {
  Tensor y(x.shape());
  simd().relu(x.data(), y.data(), static_cast<size_t>(x.size()));
  return y;
}

}  // namespace

Tensor conv2d_direct(const Tensor& x, const Tensor& w,
                     const std::vector<double>& bias, int stride, int pad) {
  conv_check(x, w, bias, stride, pad);
  int N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
  int Cout = w.extent(0), k = w.extent(2);
  int Ho = conv_out_extent(H, k, stride, pad);
  int Wo = conv_out_extent(W, k, stride, pad);
  Tensor y({N, Cout, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo) {
          double acc = bias[static_cast<size_t>(co)];
          for (int ci = 0; ci < Cin; ++ci)
            for (int kh = 0; kh < k; ++kh) {
              int hi = ho * stride - pad + kh;
              if (hi < 0 || hi >= H) continue;
              for (int kw = 0; kw < k; ++kw) {
                int wi = wo * stride - pad + kw;
                if (wi < 0 || wi >= W) continue;
                acc += w(co, ci, kh, kw) * x(n, ci, hi, wi);
              }
            }
          y(n, co, ho, wo) = acc;
        }
  return y;
}

Tensor conv2d_im2col(const Tensor& x, const Tensor& w,
                     const std::vector<double>& bias, int stride, int pad) {
  return conv_gemm(x, w, bias, stride, pad, nullptr);
}

Network::Network(std::vector<int> input_shape, std::vector<LayerSpec> specs,
                 uint64_t seed)
    : input_shape_(std::move(input_shape)), seed_(seed) {
  if (input_shape_.size() != 1 && input_shape_.size() != 3)
    throw std::invalid_argument("Network: input shape must be (F) or (C, H, W)");
  for (int e : input_shape_)
    if (e < 1) throw std::invalid_argument("Network: non-positive input extent");
  if (specs.empty()) throw std::invalid_argument("Network: no layers");

  Rng init = Rng::stream(seed, {1ull});
  std::vector<int> cur = input_shape_;
  for (const LayerSpec& spec : specs) {
    Layer layer;
    layer.spec = spec;
    layer.in_shape = cur;
    switch (spec.kind) {
      case LayerKind::conv: {
        if (cur.size() != 3)
          throw std::invalid_argument("conv: needs (C, H, W) input");
        if (spec.channels < 1 || spec.kernel < 1)
          throw std::invalid_argument("conv: bad layer spec");
        int Cin = cur[0], k = spec.kernel;
        int Ho = conv_out_extent(cur[1], k, spec.stride, spec.pad);
        int Wo = conv_out_extent(cur[2], k, spec.stride, spec.pad);
        if (Ho < 1 || Wo < 1)
          throw std::invalid_argument("conv: output collapses to nothing");
        layer.weight = Tensor({spec.channels, Cin, k, k});
        double sd = std::sqrt(2.0 / (Cin * k * k));
        for (int i = 0; i < layer.weight.size(); ++i)
          layer.weight.flat(i) = init.normal(0.0, sd);
        layer.bias.assign(static_cast<size_t>(spec.channels), 0.0);
        cur = {spec.channels, Ho, Wo};
        break;
      }
      case LayerKind::dense: {
        if (spec.channels < 1)
          throw std::invalid_argument("dense: bad layer spec");
        int in = shape_size(cur);
        layer.weight = Tensor({in, spec.channels});
        double sd = std::sqrt(2.0 / in);
        for (int i = 0; i < layer.weight.size(); ++i)
          layer.weight.flat(i) = init.normal(0.0, sd);
        layer.bias.assign(static_cast<size_t>(spec.channels), 0.0);
        cur = {spec.channels};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        if (cur.size() != 3)
          throw std::invalid_argument("pool: needs (C, H, W) input");
        int w = spec.window;
        if (w < 1 || cur[1] % w != 0 || cur[2] % w != 0)
          throw std::invalid_argument("pool: window must divide spatial extents");
        cur = {cur[0], cur[1] / w, cur[2] / w};
        break;
      }
      case LayerKind::bn: {
        layer.affine = AffineParams(cur[0]);
        layer.bn = BnState(cur[0]);
        break;
      }
      case LayerKind::mn:
      case LayerKind::mn_relu: {
        layer.affine = AffineParams(cur[0]);
        break;
      }
    }
    layer.out_shape = cur;
    layers_.push_back(std::move(layer));
  }
}

int Network::num_outputs() const {
  return shape_size(layers_.back().out_shape);
}

ForwardResult Network::forward(const Tensor& x, long long step) {
  if (x.dim() != static_cast<int>(input_shape_.size()) + 1)
    throw std::invalid_argument("forward: batch rank mismatch");
  for (size_t d = 0; d < input_shape_.size(); ++d)
    if (x.extent(static_cast<int>(d) + 1) != input_shape_[d])
      throw std::invalid_argument("forward: input shape mismatch");

  ForwardResult out;
  out.caches.resize(layers_.size());
  Tensor cur = x;
  for (size_t li = 0; li < layers_.size(); ++li) {
    Layer& layer = layers_[li];
    LayerCache& cache = out.caches[li];
    switch (layer.spec.kind) {
      case LayerKind::conv:
        cache.input = cur;
        cur = conv_gemm(cur, layer.weight, layer.bias, layer.spec.stride,
                        layer.spec.pad, &cache.col);
        break;
      case LayerKind::dense:
        cache.input = cur;
        cur = dense_fwd(cur, layer);
        break;
      case LayerKind::relu:
        cache.input = cur;
        cur = relu_fwd(cur);
        break;
      case LayerKind::maxpool:
        cache.input = cur;
        cur = maxpool_fwd(cur, layer.spec.window, &cache.argmax);
        break;
      case LayerKind::avgpool:
        cache.input = cur;
        cur = avgpool_fwd(cur, layer.spec.window);
        break;
      case LayerKind::bn: {
        RowsView v = to_rows(cur);
        BnResult r = bn_forward_train(v.rows, layer.bn, layer.affine);
        cache.bn = std::move(r.cache);
        cur = from_rows(std::move(r.y), v);
        break;
      }
      case LayerKind::mn:
      case LayerKind::mn_relu: {
        RowsView v = to_rows(cur);
        Rng rng = Rng::stream(
            seed_, {2ull, static_cast<uint64_t>(li), static_cast<uint64_t>(step)});
        MnResult r = mn_forward_train(v.rows, layer.spec.mn_cfg, layer.affine,
                                      rng, &layer.queue);
        out.effective_k.push_back(r.cache.K);
        if (layer.spec.kind == LayerKind::mn_relu) {
          MnReluResult rr = mn_relu(r.cache);
          cur = from_rows(std::move(rr.exact), v);
        } else {
          cur = from_rows(std::move(r.y), v);
        }
        cache.mn = std::move(r.cache);
        break;
      }
    }
  }
  out.logits = std::move(cur);
  return out;
}

Tensor Network::forward_to(const Tensor& x, int layers) const {
  if (layers < 0 || layers > static_cast<int>(layers_.size()))
    throw std::out_of_range("forward_to: layer index out of range");
  Tensor cur = x;
  for (int li = 0; li < layers; ++li) {
    const Layer& layer = layers_[static_cast<size_t>(li)];
    switch (layer.spec.kind) {
      case LayerKind::conv:
        cur = conv2d_im2col(cur, layer.weight, layer.bias, layer.spec.stride,
                            layer.spec.pad);
        break;
      case LayerKind::dense:
        cur = dense_fwd(cur, layer);
        break;
      case LayerKind::relu:
        cur = relu_fwd(cur);
        break;
      case LayerKind::maxpool: {
        std::vector<int> argmax;
        cur = maxpool_fwd(cur, layer.spec.window, &argmax);
        break;
      }
      case LayerKind::avgpool:
        cur = avgpool_fwd(cur, layer.spec.window);
        break;
      case LayerKind::bn: {
        RowsView v = to_rows(cur);
        cur = from_rows(bn_forward_infer(v.rows, layer.bn, layer.affine), v);
        break;
      }
      case LayerKind::mn:
      case LayerKind::mn_relu: {
        RowsView v = to_rows(cur);
        Tensor y = mn_forward_infer(v.rows, layer.queue, layer.affine,
                                    layer.spec.mn_cfg.eps,
                                    layer.spec.mn_cfg.affine);
        if (layer.spec.kind == LayerKind::mn_relu) y = relu_fwd(y);
        cur = from_rows(std::move(y), v);
        break;
      }
    }
  }
  return cur;
}

Tensor Network::forward(const Tensor& x) const {
  return forward_to(x, static_cast<int>(layers_.size()));
}

Tensor Network::forward_frozen(const Tensor& x, const ForwardResult& ref) const {
  if (ref.caches.size() != layers_.size())
    throw std::invalid_argument("forward_frozen: cache count mismatch");
  Tensor cur = x;
  for (size_t li = 0; li < layers_.size(); ++li) {
    const Layer& layer = layers_[li];
    switch (layer.spec.kind) {
      case LayerKind::conv:
        cur = conv2d_im2col(cur, layer.weight, layer.bias, layer.spec.stride,
                            layer.spec.pad);
        break;
      case LayerKind::dense:
        cur = dense_fwd(cur, layer);
        break;
      case LayerKind::relu:
        cur = relu_fwd(cur);
        break;
      case LayerKind::maxpool: {
        std::vector<int> argmax;
        cur = maxpool_fwd(cur, layer.spec.window, &argmax);
        break;
      }
      case LayerKind::avgpool:
        cur = avgpool_fwd(cur, layer.spec.window);
        break;
      case LayerKind::bn: {
        RowsView v = to_rows(cur);
        BnState scratch = layer.bn;
        BnResult r = bn_forward_train(v.rows, scratch, layer.affine);
        cur = from_rows(std::move(r.y), v);
        break;
      }
      case LayerKind::mn:
      case LayerKind::mn_relu: {
        RowsView v = to_rows(cur);
        const MnCache& rc = ref.caches[li].mn;
        MnResult r = mn_forward_frozen(v.rows, rc.resp, rc.lambda, layer.affine,
                                       layer.spec.mn_cfg.affine,
                                       layer.spec.mn_cfg.eps);
        if (layer.spec.kind == LayerKind::mn_relu) {
          MnReluResult rr = mn_relu(r.cache);
          cur = from_rows(std::move(rr.exact), v);
        } else {
          cur = from_rows(std::move(r.y), v);
        }
        break;
      }
    }
  }
  return cur;
}

BackwardResult Network::backward(const ForwardResult& fwd,
                                 const Tensor& grad_logits) const {
  if (fwd.caches.size() != layers_.size())
    throw std::invalid_argument("backward: cache count mismatch");
  std::vector<std::vector<std::vector<double>>> per_layer(layers_.size());

  Tensor grad = grad_logits;
  for (int li = static_cast<int>(layers_.size()) - 1; li >= 0; --li) {
    const Layer& layer = layers_[static_cast<size_t>(li)];
    const LayerCache& cache = fwd.caches[static_cast<size_t>(li)];
    switch (layer.spec.kind) {
      case LayerKind::conv: {
        const Tensor& x = cache.input;
        int N = x.extent(0), Cout = layer.weight.extent(0);
        int k = layer.spec.kernel;
        int Ho = grad.extent(2), Wo = grad.extent(3);
        int Q = x.extent(1) * k * k;
        int R = N * Ho * Wo;

        Tensor gy({R, Cout});
        for (int n = 0; n < N; ++n)
          for (int co = 0; co < Cout; ++co)
            for (int ho = 0; ho < Ho; ++ho)
              for (int wo = 0; wo < Wo; ++wo)
                gy((n * Ho + ho) * Wo + wo, co) = grad(n, co, ho, wo);

        std::vector<double> grad_b(static_cast<size_t>(Cout), 0.0);
        const SimdOps& ops = simd();
        for (int r = 0; r < R; ++r)
          ops.axpy(1.0, gy.row(r), grad_b.data(), static_cast<size_t>(Cout));

        std::vector<double> gyt(static_cast<size_t>(Cout) * static_cast<size_t>(R));
        transpose(R, Cout, gy.data(), gyt.data());
        std::vector<double> grad_w(static_cast<size_t>(Cout) * static_cast<size_t>(Q));
        gemm(Cout, Q, R, gyt.data(), cache.col.data(), grad_w.data());

        Tensor gcol({R, Q});
        gemm(R, Q, Cout, gy.data(), layer.weight.data(), gcol.data());
        Tensor gx(x.shape());
        col2im(gcol, k, layer.spec.stride, layer.spec.pad, Ho, Wo, gx);

        per_layer[static_cast<size_t>(li)] = {std::move(grad_w), std::move(grad_b)};
        grad = std::move(gx);
        break;
      }
      case LayerKind::dense: {
        const Tensor& x = cache.input;
        int N = x.extent(0);
        int in = layer.weight.extent(0), out = layer.weight.extent(1);
        Tensor x2 = x.dim() == 2 ? x : reshape(x, {N, in});

        std::vector<double> grad_b(static_cast<size_t>(out), 0.0);
        const SimdOps& ops = simd();
        for (int i = 0; i < N; ++i)
          ops.axpy(1.0, grad.row(i), grad_b.data(), static_cast<size_t>(out));

        std::vector<double> xt(static_cast<size_t>(in) * static_cast<size_t>(N));
        transpose(N, in, x2.data(), xt.data());
        std::vector<double> grad_w(static_cast<size_t>(in) * static_cast<size_t>(out));
        gemm(in, out, N, xt.data(), grad.data(), grad_w.data());

        std::vector<double> wt(static_cast<size_t>(out) * static_cast<size_t>(in));
        transpose(in, out, layer.weight.data(), wt.data());
        Tensor gx2({N, in});
        gemm(N, in, out, grad.data(), wt.data(), gx2.data());

        per_layer[static_cast<size_t>(li)] = {std::move(grad_w), std::move(grad_b)};
        grad = x.dim() == 2 ? std::move(gx2) : reshape(gx2, x.shape());
        break;
      }
      case LayerKind::relu: {
        Tensor gx(grad.shape());
        for (int i = 0; i < grad.size(); ++i)
          gx.flat(i) = cache.input.flat(i) > 0.0 ? grad.flat(i) : 0.0;
        grad = std::move(gx);
        break;
      }
      case LayerKind::maxpool: {
        Tensor gx(cache.input.shape());
        for (int i = 0; i < grad.size(); ++i)
          gx.flat(cache.argmax[static_cast<size_t>(i)]) += grad.flat(i);
        grad = std::move(gx);
        break;
      }
      case LayerKind::avgpool: {
        const Tensor& x = cache.input;
        int N = x.extent(0), C = x.extent(1);
        int w = layer.spec.window;
        int Ho = grad.extent(2), Wo = grad.extent(3);
        double inv = 1.0 / (w * w);
        Tensor gx(x.shape());
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c)
            for (int ho = 0; ho < Ho; ++ho)
              for (int wo = 0; wo < Wo; ++wo) {
                double g = grad(n, c, ho, wo) * inv;
                for (int kh = 0; kh < w; ++kh)
                  for (int kw = 0; kw < w; ++kw)
                    gx(n, c, ho * w + kh, wo * w + kw) += g;
              }
        grad = std::move(gx);
        break;
      }
      case LayerKind::bn: {
        RowsView v = to_rows(grad);
        NormGrads g = bn_backward(v.rows, cache.bn);
        per_layer[static_cast<size_t>(li)] = {std::move(g.grad_gamma),
                                              std::move(g.grad_beta)};
        grad = from_rows(std::move(g.grad_x), v);
        break;
      }
      case LayerKind::mn:
      case LayerKind::mn_relu: {
        RowsView v = to_rows(grad);
        NormGrads g = layer.spec.kind == LayerKind::mn
                          ? mn_backward(v.rows, cache.mn)
                          : mn_relu_backward(v.rows, cache.mn);
        per_layer[static_cast<size_t>(li)] = {std::move(g.grad_gamma),
                                              std::move(g.grad_beta)};
        grad = from_rows(std::move(g.grad_x), v);
        break;
      }
    }
  }

  BackwardResult out;
  for (auto& layer_grads : per_layer)
    for (auto& g : layer_grads) out.grads.push_back(std::move(g));
  out.grad_input = std::move(grad);
  return out;
}

std::vector<ParamRef> Network::params() {
  std::vector<ParamRef> out;
  for (size_t li = 0; li < layers_.size(); ++li) {
    Layer& l = layers_[li];
    std::string base = "layer" + std::to_string(li);
    switch (l.spec.kind) {
      case LayerKind::conv:
      case LayerKind::dense:
        out.push_back({base + ".weight", l.weight.data(),
                       static_cast<size_t>(l.weight.size())});
        out.push_back({base + ".bias", l.bias.data(), l.bias.size()});
        break;
      case LayerKind::bn:
      case LayerKind::mn:
      case LayerKind::mn_relu:
        out.push_back({base + ".gamma", l.affine.gamma.data(),
                       l.affine.gamma.size()});
        out.push_back({base + ".beta", l.affine.beta.data(),
                       l.affine.beta.size()});
        break;
      default:
        break;
    }
  }
  return out;
}

LossResult softmax_xent(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.dim() != 2)
    throw std::invalid_argument("softmax_xent: logits must be (N, classes)");
  int N = logits.extent(0), C = logits.extent(1);
  if (labels.size() != static_cast<size_t>(N))
    throw std::invalid_argument("softmax_xent: label count mismatch");

  LossResult out;
  out.grad_logits = Tensor({N, C});
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    int yi = labels[static_cast<size_t>(i)];
    if (yi < 0 || yi >= C)
      throw std::out_of_range("softmax_xent: label out of range");
    const double* l = logits.row(i);
    double mx = l[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, l[c]);
    double se = 0.0;
    for (int c = 0; c < C; ++c) se += std::exp(l[c] - mx);
    total += mx + std::log(se) - l[yi];
    double* g = out.grad_logits.row(i);
    for (int c = 0; c < C; ++c) g[c] = std::exp(l[c] - mx) / se / N;
    g[yi] -= 1.0 / N;
  }
  out.loss = total / N;
  return out;
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.dim() != 2)
    throw std::invalid_argument("accuracy: logits must be (N, classes)");
  int N = logits.extent(0), C = logits.extent(1);
  if (labels.size() != static_cast<size_t>(N))
    throw std::invalid_argument("accuracy: label count mismatch");
  int hits = 0;
  for (int i = 0; i < N; ++i) {
    const double* l = logits.row(i);
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (l[c] > l[best]) best = c;
    if (best == labels[static_cast<size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / N;
}

Optimizer::Optimizer(const OptimizerConfig& cfg,
                     const std::vector<ParamRef>& params)
    : cfg_(cfg), lr_(cfg.lr), params_(params) {
  if (cfg.lr <= 0.0) throw std::invalid_argument("optimizer: lr must be > 0");
  if (cfg.decay_every < 1)
    throw std::invalid_argument("optimizer: decay_every must be >= 1");
  vel_.resize(params_.size());
  sq_.resize(params_.size());
  for (size_t j = 0; j < params_.size(); ++j) {
    vel_[j].assign(params_[j].size, 0.0);
    sq_[j].assign(params_[j].size, 0.0);
  }
}

void Optimizer::set_epoch(int epoch, int total_epochs) {
  switch (cfg_.schedule) {
    case Schedule::constant:
      lr_ = cfg_.lr;
      break;
    case Schedule::exponential:
      lr_ = cfg_.lr * std::pow(cfg_.decay_rate, epoch / cfg_.decay_every);
      break;
    case Schedule::steps: {
      int drops = 0;
      for (double f : cfg_.step_fractions)
        if (epoch >= static_cast<int>(std::floor(f * total_epochs))) ++drops;
      lr_ = cfg_.lr / std::pow(cfg_.step_factor, drops);
      break;
    }
  }
}

void Optimizer::apply(const std::vector<std::vector<double>>& grads) {
  if (grads.size() != params_.size())
    throw std::invalid_argument("optimizer: gradient count mismatch");
  for (size_t j = 0; j < params_.size(); ++j) {
    if (grads[j].size() != params_[j].size)
      throw std::invalid_argument("optimizer: gradient size mismatch");
    double* p = params_[j].data;
    double* v = vel_[j].data();
    double* s = sq_[j].data();
    const double* g0 = grads[j].data();
    for (size_t i = 0; i < params_[j].size; ++i) {
      double g = g0[i] + cfg_.weight_decay * p[i];
      switch (cfg_.kind) {
        case OptimizerKind::sgd:
          p[i] -= lr_ * g;
          break;
        case OptimizerKind::sgd_momentum:
          v[i] = cfg_.momentum * v[i] + g;
          p[i] -= lr_ * v[i];
          break;
        case OptimizerKind::nesterov:
          v[i] = cfg_.momentum * v[i] + g;
          p[i] -= lr_ * (cfg_.momentum * v[i] + g);
          break;
        case OptimizerKind::rmsprop:
          s[i] = 0.9 * s[i] + 0.1 * g * g;
          v[i] = cfg_.momentum * v[i] + g / std::sqrt(s[i] + 1e-8);
          p[i] -= lr_ * v[i];
          break;
      }
    }
  }
}

double Network::train_step(const Tensor& x, const std::vector<int>& labels,
                           Optimizer& opt, long long step,
                           std::vector<int>* effective_k) {
  ForwardResult fwd = forward(x, step);
  LossResult loss = softmax_xent(fwd.logits, labels);
  BackwardResult back = backward(fwd, loss.grad_logits);
  opt.apply(back.grads);
  if (effective_k != nullptr) *effective_k = fwd.effective_k;
  return loss.loss;
}

TrainResult Network::train(const Tensor& train_x,
                           const std::vector<int>& train_y,
                           const Tensor& test_x,
                           const std::vector<int>& test_y,
                           const TrainOptions& opts) {
  if (opts.epochs < 1 || opts.batch_size < 1)
    throw std::invalid_argument("train: bad options");
  int N = train_x.extent(0);
  if (train_y.size() != static_cast<size_t>(N))
    throw std::invalid_argument("train: label count mismatch");
  int nb = N / opts.batch_size;
  if (nb == 0)
    throw std::invalid_argument("train: batch size exceeds dataset");

  Optimizer opt(opts.optimizer, params());
  size_t sample = static_cast<size_t>(train_x.size()) / static_cast<size_t>(N);
  std::vector<int> idx(static_cast<size_t>(N));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> per_sample(train_x.shape().begin() + 1,
                              train_x.shape().end());
  Tensor bx(with_batch(opts.batch_size, per_sample));
  std::vector<int> by(static_cast<size_t>(opts.batch_size));

  TrainResult res;
  long long gstep = 0;
  double wall = 0.0;
  for (int e = 0; e < opts.epochs; ++e) {
    opt.set_epoch(e, opts.epochs);
    Rng shuf = Rng::stream(seed_, {3ull, static_cast<uint64_t>(e)});
    shuf.shuffle(idx);

    double loss_sum = 0.0;
    std::vector<int> effk;
    auto t0 = std::chrono::steady_clock::now();
    for (int b = 0; b < nb; ++b) {
      for (int i = 0; i < opts.batch_size; ++i) {
        int src = idx[static_cast<size_t>(b * opts.batch_size + i)];
        std::memcpy(bx.data() + static_cast<size_t>(i) * sample,
                    train_x.data() + static_cast<size_t>(src) * sample,
                    sample * sizeof(double));
        by[static_cast<size_t>(i)] = train_y[static_cast<size_t>(src)];
      }
      loss_sum += train_step(bx, by, opt, gstep, &effk);
      ++gstep;
    }
    wall += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();

    EvalPoint ep;
    ep.step = gstep;
    ep.epoch = e;
    ep.train_loss = loss_sum / nb;
    ep.test_acc = evaluate(test_x, test_y, opts.batch_size, &ep.test_loss);
    ep.effective_k = effk;
    ep.wall_seconds = wall;
    if (opts.on_eval) opts.on_eval(ep);
    res.evals.push_back(std::move(ep));
  }
  return res;
}

double Network::evaluate(const Tensor& x, const std::vector<int>& labels,
                         int batch_size, double* loss_out) const {
  int N = x.extent(0);
  if (labels.size() != static_cast<size_t>(N))
    throw std::invalid_argument("evaluate: label count mismatch");
  if (batch_size < 1) throw std::invalid_argument("evaluate: bad batch size");
  size_t sample = static_cast<size_t>(x.size()) / static_cast<size_t>(N);
  std::vector<int> per_sample(x.shape().begin() + 1, x.shape().end());

  double loss_total = 0.0, acc_total = 0.0;
  int done = 0;
  while (done < N) {
    int B = std::min(batch_size, N - done);
    Tensor cx(with_batch(B, per_sample));
    std::memcpy(cx.data(), x.data() + static_cast<size_t>(done) * sample,
                static_cast<size_t>(B) * sample * sizeof(double));
    std::vector<int> cy(labels.begin() + done, labels.begin() + done + B);
    Tensor logits = forward(cx);
    LossResult lr = softmax_xent(logits, cy);
    loss_total += lr.loss * B;
    acc_total += accuracy(logits, cy) * B;
    done += B;
  }
  if (loss_out != nullptr) *loss_out = loss_total / N;
  return acc_total / N;
}

long long steps_to_accuracy(const std::vector<EvalPoint>& evals,
                            double target) {
  for (const EvalPoint& e : evals)
    if (e.test_acc >= target) return e.step;
  return -1;
}

}  // namespace mixnorm
