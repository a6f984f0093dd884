#include "mixnorm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace mixnorm {

namespace {

constexpr uint64_t kStructureStream = 10;
constexpr uint64_t kSampleStream = 11;

void check_counts(int n, int classes, const char* who) {
  if (n < 1) throw std::invalid_argument(std::string(who) + ": n must be >= 1");
  if (classes < 1)
    throw std::invalid_argument(std::string(who) + ": classes must be >= 1");
}

int max_label(const std::vector<int>& y) {
  int mx = 0;
  for (int v : y) mx = std::max(mx, v);
  return mx;
}

}  // namespace

Dataset gen_rectified_gmm(const RectifiedGmmSpec& spec, int n, uint64_t seed,
                          uint64_t split) {
  check_counts(n, spec.classes, "gen_rectified_gmm");
  if (spec.dim < 1 || spec.hidden < 1)
    throw std::invalid_argument("gen_rectified_gmm: bad spec");
  if (spec.sigma <= 0.0)
    throw std::invalid_argument("gen_rectified_gmm: sigma must be > 0");

  size_t latents = static_cast<size_t>(spec.classes) *
                   static_cast<size_t>(spec.dim) *
                   static_cast<size_t>(spec.hidden);
  std::vector<double> anchor(latents), weight(latents);
  Rng structure = Rng::stream(seed, {kStructureStream});
  for (size_t i = 0; i < latents; ++i)
    anchor[i] = spec.anchor_shift + structure.normal(0.0, spec.anchor_spread);
  double wsd = 1.0 / std::sqrt(static_cast<double>(spec.hidden));
  for (size_t i = 0; i < latents; ++i)
    weight[i] = spec.unit_weights ? 1.0 : structure.normal(0.0, wsd);

  Rng rs = Rng::stream(seed, {kSampleStream, split});
  Dataset d;
  d.x = Tensor({n, spec.dim});
  d.y.resize(static_cast<size_t>(n));
  d.num_classes = spec.classes;
  for (int i = 0; i < n; ++i) {
    int yi = rs.uniform_int(spec.classes);
    d.y[static_cast<size_t>(i)] = yi;
    double* row = d.x.row(i);
    for (int j = 0; j < spec.dim; ++j) {
      size_t base = (static_cast<size_t>(yi) * spec.dim + static_cast<size_t>(j)) *
                    static_cast<size_t>(spec.hidden);
      double acc = 0.0;
      for (int h = 0; h < spec.hidden; ++h) {
        double z = rs.normal(anchor[base + static_cast<size_t>(h)], spec.sigma);
        if (z > 0.0) acc += weight[base + static_cast<size_t>(h)] * z;
      }
      row[j] = acc;
    }
  }
  return d;
}

Dataset gen_blobs(const BlobsSpec& spec, int n, uint64_t seed, uint64_t split) {
  check_counts(n, spec.classes, "gen_blobs");
  if (spec.dim < 1) throw std::invalid_argument("gen_blobs: bad spec");

  Rng structure = Rng::stream(seed, {kStructureStream});
  std::vector<double> centers(static_cast<size_t>(spec.classes) *
                              static_cast<size_t>(spec.dim));
  for (double& c : centers) c = structure.normal(0.0, spec.spread);

  Rng rs = Rng::stream(seed, {kSampleStream, split});
  Dataset d;
  d.x = Tensor({n, spec.dim});
  d.y.resize(static_cast<size_t>(n));
  d.num_classes = spec.classes;
  for (int i = 0; i < n; ++i) {
    int yi = rs.uniform_int(spec.classes);
    d.y[static_cast<size_t>(i)] = yi;
    double* row = d.x.row(i);
    const double* c = centers.data() + static_cast<size_t>(yi) * spec.dim;
    for (int j = 0; j < spec.dim; ++j) row[j] = rs.normal(c[j], spec.sigma);
  }
  return d;
}

Dataset gen_spirals(const SpiralsSpec& spec, int n, uint64_t seed,
                    uint64_t split) {
  check_counts(n, spec.classes, "gen_spirals");

  Rng rs = Rng::stream(seed, {kSampleStream, split});
  Dataset d;
  d.x = Tensor({n, 2});
  d.y.resize(static_cast<size_t>(n));
  d.num_classes = spec.classes;
  for (int i = 0; i < n; ++i) {
    int yi = rs.uniform_int(spec.classes);
    d.y[static_cast<size_t>(i)] = yi;
    double t = rs.uniform();
    double th = 2.0 * std::numbers::pi *
                (spec.turns * t + static_cast<double>(yi) / spec.classes);
    d.x(i, 0) = t * std::cos(th) + rs.normal(0.0, spec.noise);
    d.x(i, 1) = t * std::sin(th) + rs.normal(0.0, spec.noise);
  }
  return d;
}

Dataset gen_images(const SyntheticImageSpec& spec, int n, uint64_t seed,
                   uint64_t split) {
  check_counts(n, spec.classes, "gen_images");
  if (spec.channels < 1 || spec.height < 1 || spec.width < 1 ||
      spec.hidden < 1 || spec.smooth_passes < 0)
    throw std::invalid_argument("gen_images: bad spec");

  int C = spec.channels, H = spec.height, W = spec.width;
  size_t pixels = static_cast<size_t>(C) * static_cast<size_t>(H) *
                  static_cast<size_t>(W);

  Rng structure = Rng::stream(seed, {kStructureStream});
  std::vector<std::vector<double>> bases(static_cast<size_t>(spec.hidden));
  std::vector<double> scratch(pixels);
  for (auto& basis : bases) {
    basis.resize(pixels);
    for (double& v : basis) v = structure.normal();
    for (int pass = 0; pass < spec.smooth_passes; ++pass) {
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            double acc = 0.0;
            for (int dh = -1; dh <= 1; ++dh)
              for (int dw = -1; dw <= 1; ++dw) {
                int hh = h + dh, ww = w + dw;
                if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                acc += basis[(static_cast<size_t>(c) * H + static_cast<size_t>(hh)) * W +
                             static_cast<size_t>(ww)];
              }
            scratch[(static_cast<size_t>(c) * H + static_cast<size_t>(h)) * W +
                    static_cast<size_t>(w)] = acc / 9.0;
          }
      basis = scratch;
    }
    double rms = 0.0;
    for (double v : basis) rms += v * v;
    rms = std::sqrt(rms / static_cast<double>(pixels));
    if (rms > 0.0)
      for (double& v : basis) v /= rms;
  }

  std::vector<double> anchor(static_cast<size_t>(spec.classes) *
                             static_cast<size_t>(spec.hidden));
  for (double& a : anchor) a = structure.normal(0.0, spec.anchor_spread);

  Rng rs = Rng::stream(seed, {kSampleStream, split});
  Dataset d;
  d.x = Tensor({n, C, H, W});
  d.y.resize(static_cast<size_t>(n));
  d.num_classes = spec.classes;
  for (int i = 0; i < n; ++i) {
    int yi = rs.uniform_int(spec.classes);
    d.y[static_cast<size_t>(i)] = yi;
    double* img = d.x.data() + static_cast<size_t>(i) * pixels;
    std::memset(img, 0, pixels * sizeof(double));
    for (int h = 0; h < spec.hidden; ++h) {
      double s = rs.normal(
          anchor[static_cast<size_t>(yi) * spec.hidden + static_cast<size_t>(h)], 1.0);
      if (s <= 0.0) continue;
      const double* basis = bases[static_cast<size_t>(h)].data();
      for (size_t p = 0; p < pixels; ++p) img[p] += s * basis[p];
    }
    for (size_t p = 0; p < pixels; ++p) img[p] += rs.normal(0.0, spec.noise);
  }
  return d;
}

namespace {

uint32_t read_be32(std::ifstream& in, const std::string& path, size_t offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    throw std::runtime_error(path + ": truncated at byte " +
                             std::to_string(offset + static_cast<size_t>(in.gcount())));
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace

Dataset load_images(const std::string& images_path,
                    const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error(images_path + ": cannot open");
  uint32_t magic = read_be32(fi, images_path, 0);
  if (magic != 0x00000803u)
    throw std::runtime_error(images_path + ": bad magic at byte 0 (got " +
                             std::to_string(magic) + ", want 2051)");
  uint32_t n = read_be32(fi, images_path, 4);
  uint32_t rows = read_be32(fi, images_path, 8);
  uint32_t cols = read_be32(fi, images_path, 12);
  size_t count = static_cast<size_t>(n) * rows * cols;
  std::vector<unsigned char> pixels(count);
  fi.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(count));
  if (static_cast<size_t>(fi.gcount()) != count)
    throw std::runtime_error(
        images_path + ": truncated at byte " +
        std::to_string(16 + static_cast<size_t>(fi.gcount())));

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error(labels_path + ": cannot open");
  uint32_t lmagic = read_be32(fl, labels_path, 0);
  if (lmagic != 0x00000801u)
    throw std::runtime_error(labels_path + ": bad magic at byte 0 (got " +
                             std::to_string(lmagic) + ", want 2049)");
  uint32_t m = read_be32(fl, labels_path, 4);
  if (m != n)
    throw std::runtime_error(labels_path + ": label count " + std::to_string(m) +
                             " does not match image count " + std::to_string(n));
  std::vector<unsigned char> labels(m);
  fl.read(reinterpret_cast<char*>(labels.data()),
          static_cast<std::streamsize>(m));
  if (static_cast<size_t>(fl.gcount()) != m)
    throw std::runtime_error(
        labels_path + ": truncated at byte " +
        std::to_string(8 + static_cast<size_t>(fl.gcount())));

  Dataset d;
  d.x = Tensor({static_cast<int>(n), 1, static_cast<int>(rows),
                static_cast<int>(cols)});
  for (size_t p = 0; p < count; ++p)
    d.x.flat(static_cast<int>(p)) = pixels[p] / 255.0;
  d.y.resize(m);
  for (size_t i = 0; i < m; ++i) d.y[i] = labels[i];
  d.num_classes = max_label(d.y) + 1;
  return d;
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");

  std::vector<double> values;
  std::vector<int> labels;
  int width = -1;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;

    std::vector<double> fields;
    const char* p = line.c_str();
    const char* end = p + line.size();
    while (p < end) {
      char* next = nullptr;
      double v = std::strtod(p, &next);
      if (next == p)
        throw std::runtime_error(path + " line " + std::to_string(lineno) +
                                 ": cannot parse value");
      fields.push_back(v);
      p = next;
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
      if (p < end) {
        if (*p != ',')
          throw std::runtime_error(path + " line " + std::to_string(lineno) +
                                   ": expected ','");
        ++p;
      }
    }
    if (fields.size() < 2)
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": need a label and at least one feature");
    double lab = fields[0];
    if (lab < 0.0 || lab != std::floor(lab))
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": label must be a non-negative integer");
    int f = static_cast<int>(fields.size()) - 1;
    if (width < 0)
      width = f;
    else if (f != width)
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": expected " + std::to_string(width) +
                               " features, got " + std::to_string(f));
    labels.push_back(static_cast<int>(lab));
    values.insert(values.end(), fields.begin() + 1, fields.end());
  }
  if (labels.empty()) throw std::runtime_error(path + ": no data rows");

  Dataset d;
  d.x = Tensor::from({static_cast<int>(labels.size()), width}, std::move(values));
  d.y = std::move(labels);
  d.num_classes = max_label(d.y) + 1;
  return d;
}

ChannelStats channel_stats(const Tensor& x) {
  Tensor rows = x.dim() == 4 ? flatten_batch(x) : x;
  if (rows.dim() != 2)
    throw std::invalid_argument("channel_stats: input must be 2-D or 4-D");
  int m = rows.extent(0), C = rows.extent(1);
  ChannelStats s;
  s.mean.assign(static_cast<size_t>(C), 0.0);
  s.std.assign(static_cast<size_t>(C), 0.0);
  for (int i = 0; i < m; ++i) {
    const double* r = rows.row(i);
    for (int c = 0; c < C; ++c) {
      s.mean[static_cast<size_t>(c)] += r[c];
      s.std[static_cast<size_t>(c)] += r[c] * r[c];
    }
  }
  for (int c = 0; c < C; ++c) {
    double mu = s.mean[static_cast<size_t>(c)] / m;
    double var = s.std[static_cast<size_t>(c)] / m - mu * mu;
    s.mean[static_cast<size_t>(c)] = mu;
    s.std[static_cast<size_t>(c)] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

void standardize(Tensor& x, const ChannelStats& stats) {
  if (x.dim() == 2) {
    int m = x.extent(0), C = x.extent(1);
    if (stats.mean.size() != static_cast<size_t>(C))
      throw std::invalid_argument("standardize: stats size mismatch");
    for (int i = 0; i < m; ++i) {
      double* r = x.row(i);
      for (int c = 0; c < C; ++c)
        r[c] = (r[c] - stats.mean[static_cast<size_t>(c)]) /
               stats.std[static_cast<size_t>(c)];
    }
    return;
  }
  if (x.dim() != 4)
    throw std::invalid_argument("standardize: input must be 2-D or 4-D");
  int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (stats.mean.size() != static_cast<size_t>(C))
    throw std::invalid_argument("standardize: stats size mismatch");
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double mu = stats.mean[static_cast<size_t>(c)];
      double sd = stats.std[static_cast<size_t>(c)];
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) x(n, c, h, w) = (x(n, c, h, w) - mu) / sd;
    }
}

Tensor augment_flip_crop(const Tensor& x, int pad, Rng& rng) {
  if (x.dim() != 4)
    throw std::invalid_argument("augment_flip_crop: input must be 4-D");
  if (pad < 0) throw std::invalid_argument("augment_flip_crop: pad must be >= 0");
  int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n) {
    bool flip = rng.uniform() < 0.5;
    int dy = rng.uniform_int(2 * pad + 1) - pad;
    int dx = rng.uniform_int(2 * pad + 1) - pad;
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          int sh = h + dy;
          int sw = (flip ? W - 1 - w : w) + dx;
          out(n, c, h, w) = (sh >= 0 && sh < H && sw >= 0 && sw < W)
                                ? x(n, c, sh, sw)
                                : 0.0;
        }
  }
  return out;
}

}  // namespace mixnorm
