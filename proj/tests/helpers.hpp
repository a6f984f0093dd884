#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mixnorm/rng.hpp"
#include "mixnorm/tensor.hpp"

namespace mixtest {

inline mixnorm::Tensor random_uniform(std::vector<int> shape, mixnorm::Rng& rng,
                                      double lo = -1.0, double hi = 1.0) {
  mixnorm::Tensor t(std::move(shape));
  for (int i = 0; i < t.size(); ++i) t.flat(i) = rng.uniform(lo, hi);
  return t;
}

inline mixnorm::Tensor random_normal(std::vector<int> shape, mixnorm::Rng& rng,
                                     double mu = 0.0, double sd = 1.0) {
  mixnorm::Tensor t(std::move(shape));
  for (int i = 0; i < t.size(); ++i) t.flat(i) = rng.normal(mu, sd);
  return t;
}

inline double max_abs_diff(const mixnorm::Tensor& a, const mixnorm::Tensor& b) {
  double worst = 0.0;
  for (int i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.flat(i) - b.flat(i)));
  return worst;
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Relative error with a unit floor in the denominator, shared by every
// finite-difference check.
inline double rel_err(double got, double want) {
  return std::abs(got - want) /
         std::max({1.0, std::abs(got), std::abs(want)});
}

// Empty per-test scratch directory under the system temp dir.
inline std::filesystem::path fresh_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("mixnorm-test-" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

}  // namespace mixtest
