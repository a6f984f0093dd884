#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixnorm/rng.hpp"
#include "mixnorm/tensor.hpp"

namespace mixnorm {

struct Dataset {
  Tensor x;  // (N, F) or (N, C, H, W)
  std::vector<int> y;
  int num_classes = 0;
};

// Class-conditional rectified mixture: each feature is a weighted sum of
// rectified Gaussian latents whose anchors depend on the class,
//   x_ij = sum_h w_cjh * max(0, z_ijh),   z_ijh ~ N(a_cjh, sigma^2).
// The rectification makes per-feature marginals multi-modal (a point mass
// plus a continuous part), which is the regime mixture normalization targets.
struct RectifiedGmmSpec {
  int classes = 6;
  int dim = 32;
  int hidden = 8;
  double sigma = 1.0;
  double anchor_spread = 1.5;  // class anchors ~ N(anchor_shift, spread^2)
  double anchor_shift = 0.0;
  bool unit_weights = false;  // w = 1 instead of N(0, 1/hidden)
};

// Structure (anchors, weights) depends on seed only; samples additionally on
// split, so train/test splits share one generative model.
Dataset gen_rectified_gmm(const RectifiedGmmSpec& spec, int n, uint64_t seed,
                          uint64_t split = 0);

struct BlobsSpec {
  int classes = 4;
  int dim = 16;
  double spread = 3.0;  // center scatter
  double sigma = 1.0;   // within-class std
};

Dataset gen_blobs(const BlobsSpec& spec, int n, uint64_t seed,
                  uint64_t split = 0);

struct SpiralsSpec {
  int classes = 3;
  double turns = 1.5;
  double noise = 0.05;
};

Dataset gen_spirals(const SpiralsSpec& spec, int n, uint64_t seed,
                    uint64_t split = 0);

// Synthetic images: fixed smoothed random basis images combined with
// class-anchored rectified coefficients s_h = max(0, N(a_ch, 1)), plus pixel
// noise. Small enough to train a conv net on quickly, with the same rectified
// multi-modal structure as the vector task.
struct SyntheticImageSpec {
  int classes = 4;
  int channels = 1;
  int height = 16;
  int width = 16;
  int hidden = 6;  // number of basis images
  double anchor_spread = 1.5;
  double noise = 0.1;
  int smooth_passes = 2;  // 3x3 box-blur passes applied to each basis
};

Dataset gen_images(const SyntheticImageSpec& spec, int n, uint64_t seed,
                   uint64_t split = 0);

// IDX-format image/label pair (big-endian, magics 0x00000803 / 0x00000801).
// Pixels are scaled to [0, 1]; images come back as (N, 1, rows, cols).
Dataset load_images(const std::string& images_path,
                    const std::string& labels_path);

// Text rows "label,v0,v1,...". Blank lines and lines starting with '#' are
// skipped; errors carry 1-based line numbers.
Dataset load_csv(const std::string& path);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Per-channel (4-D) or per-feature (2-D) mean and population std.
ChannelStats channel_stats(const Tensor& x);
void standardize(Tensor& x, const ChannelStats& stats);

// Horizontal flip with probability 1/2, then a random crop from a zero-padded
// copy (offsets uniform in [-pad, pad]); per-sample, in one pass.
Tensor augment_flip_crop(const Tensor& x, int pad, Rng& rng);

}  // namespace mixnorm
