#include "mixnorm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "mixnorm/simd.hpp"

namespace mixnorm {

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)) {
  size_t count = 1;
  for (int e : shape_) {
    if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent");
    count *= static_cast<size_t>(e);
  }
  data_.assign(count, fill);
  compute_strides();
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  Tensor t(std::move(shape));
  if (values.size() != t.data_.size())
    throw std::invalid_argument("Tensor::from: value count does not match shape");
  t.data_ = std::move(values);
  return t;
}

void Tensor::compute_strides() {
  strides_.assign(shape_.size(), 1);
  for (int i = static_cast<int>(shape_.size()) - 2; i >= 0; --i)
    strides_[static_cast<size_t>(i)] =
        strides_[static_cast<size_t>(i + 1)] * shape_[static_cast<size_t>(i + 1)];
}

double& Tensor::operator()(int i, int j) {
  return data_[static_cast<size_t>(i) * static_cast<size_t>(strides_[0]) +
               static_cast<size_t>(j)];
}

double Tensor::operator()(int i, int j) const {
  return data_[static_cast<size_t>(i) * static_cast<size_t>(strides_[0]) +
               static_cast<size_t>(j)];
}

double& Tensor::operator()(int n, int c, int h, int w) {
  return data_[static_cast<size_t>(n) * static_cast<size_t>(strides_[0]) +
               static_cast<size_t>(c) * static_cast<size_t>(strides_[1]) +
               static_cast<size_t>(h) * static_cast<size_t>(strides_[2]) +
               static_cast<size_t>(w)];
}

double Tensor::operator()(int n, int c, int h, int w) const {
  return data_[static_cast<size_t>(n) * static_cast<size_t>(strides_[0]) +
               static_cast<size_t>(c) * static_cast<size_t>(strides_[1]) +
               static_cast<size_t>(h) * static_cast<size_t>(strides_[2]) +
               static_cast<size_t>(w)];
}

double* Tensor::row(int i) {
  return data_.data() + static_cast<size_t>(i) * static_cast<size_t>(strides_[0]);
}

const double* Tensor::row(int i) const {
  return data_.data() + static_cast<size_t>(i) * static_cast<size_t>(strides_[0]);
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i)
    os << (i ? "," : "") << shape_[i];
  os << ")";
  return os.str();
}

Tensor flatten_batch(const Tensor& x) {
  if (x.dim() != 4)
    throw std::invalid_argument("flatten_batch: expected 4-D input, got " +
                                x.shape_str());
  int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor out({N * H * W, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          out((n * H + h) * W + w, c) = x(n, c, h, w);
  return out;
}

Tensor unflatten_batch(const Tensor& rows, int N, int C, int H, int W) {
  if (rows.dim() != 2 || rows.extent(0) != N * H * W || rows.extent(1) != C)
    throw std::invalid_argument("unflatten_batch: shape mismatch");
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          out(n, c, h, w) = rows((n * H + h) * W + w, c);
  return out;
}

std::vector<int> select_set(const std::vector<int>& shape, NormMethod method,
                            const Site& site, int groups) {
  if (shape.size() != 4)
    throw std::invalid_argument("select_set: expected a 4-D shape");
  int N = shape[0], C = shape[1], H = shape[2], W = shape[3];
  if (method == NormMethod::GN) {
    if (groups < 1 || C % groups != 0)
      throw std::invalid_argument("select_set: GN group count must divide C");
  }
  int per_group = method == NormMethod::GN ? C / groups : 0;
  std::vector<int> out;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      bool member = false;
      switch (method) {
        case NormMethod::BN: member = c == site.c; break;
        case NormMethod::LN: member = n == site.n; break;
        case NormMethod::IN: member = n == site.n && c == site.c; break;
        case NormMethod::GN:
          member = n == site.n && c / per_group == site.c / per_group;
          break;
      }
      if (!member) continue;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          out.push_back(((n * C + c) * H + h) * W + w);
    }
  return out;
}

void gemm(int M, int N, int K, const double* A, const double* B, double* C,
          bool accumulate) {
  if (!accumulate)
    std::memset(C, 0, sizeof(double) * static_cast<size_t>(M) * static_cast<size_t>(N));
  const SimdOps& ops = simd();
  for (int i = 0; i < M; ++i) {
    double* crow = C + static_cast<size_t>(i) * static_cast<size_t>(N);
    const double* arow = A + static_cast<size_t>(i) * static_cast<size_t>(K);
    for (int k = 0; k < K; ++k) {
      double a = arow[k];
      if (a != 0.0)
        ops.axpy(a, B + static_cast<size_t>(k) * static_cast<size_t>(N), crow,
                 static_cast<size_t>(N));
    }
  }
}

}  // namespace mixnorm
