#pragma once

#include <string>
#include <vector>

namespace mixnorm {

// Dense row-major float64 array. Activations use either the 4-D layout
// (N, C, H, W) or the flattened 2-D layout (m, C) with m = N*H*W.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  static Tensor from(std::vector<int> shape, std::vector<double> values);

  int dim() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int size() const { return static_cast<int>(data_.size()); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& flat(int i) { return data_[static_cast<size_t>(i)]; }
  double flat(int i) const { return data_[static_cast<size_t>(i)]; }

  double& operator()(int i, int j);
  double operator()(int i, int j) const;
  double& operator()(int n, int c, int h, int w);
  double operator()(int n, int c, int h, int w) const;

  // Pointer to row i of a 2-D tensor.
  double* row(int i);
  const double* row(int i) const;

  bool all_finite() const;
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<int> strides_;
  std::vector<double> data_;

  void compute_strides();
};

// (N, C, H, W) -> (m, C) with m = N*H*W; row s = (n*H + h)*W + w holds the
// C-vector at that site, so rows are ordered batch-major then spatial.
Tensor flatten_batch(const Tensor& x);

// Inverse of flatten_batch for the given 4-D extents.
Tensor unflatten_batch(const Tensor& rows, int N, int C, int H, int W);

enum class NormMethod { BN, LN, IN, GN };

struct Site {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
};

// Flat indices (into the NCHW tensor) of the sample set the statistics at
// `site` are computed over, for each normalization flavor. GN requires G to
// divide C.
std::vector<int> select_set(const std::vector<int>& shape, NormMethod method,
                            const Site& site, int groups = 1);

// C[MxN] = A[MxK] * B[KxN] (row-major); accumulates into C when accumulate is
// set, otherwise overwrites.
void gemm(int M, int N, int K, const double* A, const double* B, double* C,
          bool accumulate = false);

}  // namespace mixnorm
