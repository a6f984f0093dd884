#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixnorm/datagen.hpp"
#include "mixnorm/net.hpp"

namespace mixnorm {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::string kind;  // rectified_gmm | blobs | spirals | images | idx | csv
  int n_train = 10000;
  int n_test = 2000;
  RectifiedGmmSpec rect;
  BlobsSpec blobs;
  SpiralsSpec spirals;
  SyntheticImageSpec images;
  std::string idx_train_images, idx_train_labels;
  std::string idx_test_images, idx_test_labels;
  std::string csv_train, csv_test;
  bool standardize = true;
};

// Network template entry. "norm" and "norm_relu" are placeholders that each
// variant substitutes; the final classifier layer is appended automatically.
struct TemplateLayer {
  std::string kind;
  int channels = 0;  // conv out_channels / dense features
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  int window = 2;
};

struct VariantConfig {
  std::string name;
  std::string norm;  // bn | mn | mn_relu
  MnConfig mn;
  int queue_capacity = 10;
  double queue_zeta = 0.9;
};

struct ExperimentConfig {
  std::string name;
  DatasetConfig dataset;
  std::vector<TemplateLayer> network;
  std::vector<VariantConfig> variants;
  OptimizerConfig optimizer;
  int epochs = 10;
  int batch_size = 128;
  std::vector<uint64_t> seeds;
  nlohmann::json raw;  // the parsed document, embedded into checkpoints
};

// Throws ConfigError with a dotted field path on any problem, including
// unknown keys.
ExperimentConfig parse_experiment(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::string& path);

// Expands placeholders for one variant and appends dense(num_classes).
std::vector<LayerSpec> instantiate_layers(const ExperimentConfig& cfg,
                                          const VariantConfig& v,
                                          int num_classes);

// Applies the variant's queue settings to every mixture layer.
void configure_queues(Network& net, const VariantConfig& v);

struct SplitData {
  Dataset train;
  Dataset test;
};

// Generates or loads both splits; when configured, standardizes both with the
// train split's statistics.
SplitData make_splits(const DatasetConfig& d, uint64_t seed);

std::vector<int> sample_shape(const Dataset& d);

}  // namespace mixnorm
