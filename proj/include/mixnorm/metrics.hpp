#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixnorm/tensor.hpp"

namespace mixnorm {

struct RunRow {
  std::string run_id;
  std::string variant;
  uint64_t seed = 0;
  long long step = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  std::vector<int> effective_k;  // per mn layer; empty for bn runs
};

// One metrics file worth of rows. Wall-clock timings live in a side file
// (metrics_wall_path) so the metrics CSV itself is bit-reproducible; the
// vector is either empty or parallel to rows.
struct RunRecord {
  std::vector<RunRow> rows;
  std::vector<double> wall_seconds;
};

std::string metrics_wall_path(const std::string& csv_path);
void write_metrics_csv(const std::string& path, const RunRecord& rec);
RunRecord read_metrics_csv(const std::string& path);

struct PlotOptions {
  int window = 10;  // trailing window, in eval points
  int width = 960;
  int height = 560;
  std::string title;
};

// Windowed test-error curves per variant with a +/- 1 sd band across seeds,
// written as a standalone SVG.
void emit_plots(const std::string& out_path,
                const std::vector<RunRecord>& runs, const PlotOptions& opts);

struct GmmFitSummary {
  int k = 0;
  std::vector<double> lambda;
  std::vector<double> mu;      // per component (scalar channels)
  std::vector<double> sigma2;  // per component
  double ll = 0.0;
};

struct ChannelAnalysis {
  int channel = 0;
  int n = 0;
  double gauss_mu = 0.0;
  double gauss_sigma2 = 0.0;
  double gauss_ll = 0.0;  // mean per-sample log-likelihood
  std::vector<GmmFitSummary> fits;
  std::vector<double> hist_edges;      // bins + 1
  std::vector<long long> hist_counts;  // bins
};

// Per-channel density analysis of (m, C) activations: histogram, a single
// Gaussian fit, and mixture fits for each requested K.
std::vector<ChannelAnalysis> analyze_distribution(
    const Tensor& acts, const std::vector<int>& channels,
    const std::vector<int>& ks, uint64_t seed, int bins = 64);

void write_analysis_json(const std::string& path,
                         const std::vector<ChannelAnalysis>& rows);
void write_analysis_svg(const std::string& path, const ChannelAnalysis& a);

}  // namespace mixnorm
