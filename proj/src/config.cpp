#include "mixnorm/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace mixnorm {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw ConfigError(path + ": " + msg);
}

void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path, "expected an object");
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) fail(path + "." + it.key(), "unknown key");
  }
}

int get_int(const json& j, const std::string& path, const char* key, int def,
            int lo, int hi) {
  if (!j.contains(key)) return def;
  const json& v = j[key];
  if (!v.is_number_integer()) fail(path + "." + key, "expected an integer");
  long long n = v.get<long long>();
  if (n < lo || n > hi)
    fail(path + "." + key,
         "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<int>(n);
}

int req_int(const json& j, const std::string& path, const char* key, int lo,
            int hi) {
  if (!j.contains(key)) fail(path, std::string("missing key \"") + key + "\"");
  return get_int(j, path, key, 0, lo, hi);
}

double get_num(const json& j, const std::string& path, const char* key,
               double def, double lo, double hi) {
  if (!j.contains(key)) return def;
  const json& v = j[key];
  if (!v.is_number()) fail(path + "." + key, "expected a number");
  double x = v.get<double>();
  if (!(x >= lo && x <= hi)) fail(path + "." + key, "out of range");
  return x;
}

bool get_bool(const json& j, const std::string& path, const char* key,
              bool def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_boolean()) fail(path + "." + key, "expected a boolean");
  return j[key].get<bool>();
}

std::string req_str(const json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) fail(path, std::string("missing key \"") + key + "\"");
  if (!j[key].is_string()) fail(path + "." + key, "expected a string");
  return j[key].get<std::string>();
}

std::string get_str(const json& j, const std::string& path, const char* key,
                    const std::string& def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_string()) fail(path + "." + key, "expected a string");
  return j[key].get<std::string>();
}

DatasetConfig parse_dataset(const json& j, const std::string& path) {
  expect_object(j, path);
  DatasetConfig d;
  d.kind = req_str(j, path, "kind");
  d.standardize = get_bool(j, path, "standardize", true);

  if (d.kind == "rectified_gmm") {
    check_keys(j, path,
               {"kind", "standardize", "n_train", "n_test", "classes", "dim",
                "hidden", "sigma", "anchor_spread", "anchor_shift",
                "unit_weights"});
    d.n_train = get_int(j, path, "n_train", d.n_train, 1, 1 << 24);
    d.n_test = get_int(j, path, "n_test", d.n_test, 1, 1 << 24);
    d.rect.classes = get_int(j, path, "classes", d.rect.classes, 1, 4096);
    d.rect.dim = get_int(j, path, "dim", d.rect.dim, 1, 1 << 20);
    d.rect.hidden = get_int(j, path, "hidden", d.rect.hidden, 1, 4096);
    d.rect.sigma = get_num(j, path, "sigma", d.rect.sigma, 1e-12, 1e6);
    d.rect.anchor_spread =
        get_num(j, path, "anchor_spread", d.rect.anchor_spread, 0.0, 1e6);
    d.rect.anchor_shift =
        get_num(j, path, "anchor_shift", d.rect.anchor_shift, -1e6, 1e6);
    d.rect.unit_weights = get_bool(j, path, "unit_weights", false);
  } else if (d.kind == "blobs") {
    check_keys(j, path, {"kind", "standardize", "n_train", "n_test", "classes",
                         "dim", "spread", "sigma"});
    d.n_train = get_int(j, path, "n_train", d.n_train, 1, 1 << 24);
    d.n_test = get_int(j, path, "n_test", d.n_test, 1, 1 << 24);
    d.blobs.classes = get_int(j, path, "classes", d.blobs.classes, 1, 4096);
    d.blobs.dim = get_int(j, path, "dim", d.blobs.dim, 1, 1 << 20);
    d.blobs.spread = get_num(j, path, "spread", d.blobs.spread, 0.0, 1e6);
    d.blobs.sigma = get_num(j, path, "sigma", d.blobs.sigma, 1e-12, 1e6);
  } else if (d.kind == "spirals") {
    check_keys(j, path, {"kind", "standardize", "n_train", "n_test", "classes",
                         "turns", "noise"});
    d.n_train = get_int(j, path, "n_train", d.n_train, 1, 1 << 24);
    d.n_test = get_int(j, path, "n_test", d.n_test, 1, 1 << 24);
    d.spirals.classes = get_int(j, path, "classes", d.spirals.classes, 1, 64);
    d.spirals.turns = get_num(j, path, "turns", d.spirals.turns, 0.0, 64.0);
    d.spirals.noise = get_num(j, path, "noise", d.spirals.noise, 0.0, 10.0);
  } else if (d.kind == "images") {
    check_keys(j, path,
               {"kind", "standardize", "n_train", "n_test", "classes",
                "channels", "height", "width", "hidden", "anchor_spread",
                "noise", "smooth_passes"});
    d.n_train = get_int(j, path, "n_train", d.n_train, 1, 1 << 24);
    d.n_test = get_int(j, path, "n_test", d.n_test, 1, 1 << 24);
    d.images.classes = get_int(j, path, "classes", d.images.classes, 1, 4096);
    d.images.channels = get_int(j, path, "channels", d.images.channels, 1, 64);
    d.images.height = get_int(j, path, "height", d.images.height, 1, 1024);
    d.images.width = get_int(j, path, "width", d.images.width, 1, 1024);
    d.images.hidden = get_int(j, path, "hidden", d.images.hidden, 1, 4096);
    d.images.anchor_spread =
        get_num(j, path, "anchor_spread", d.images.anchor_spread, 0.0, 1e6);
    d.images.noise = get_num(j, path, "noise", d.images.noise, 0.0, 1e6);
    d.images.smooth_passes =
        get_int(j, path, "smooth_passes", d.images.smooth_passes, 0, 64);
  } else if (d.kind == "idx") {
    check_keys(j, path, {"kind", "standardize", "train_images", "train_labels",
                         "test_images", "test_labels"});
    d.idx_train_images = req_str(j, path, "train_images");
    d.idx_train_labels = req_str(j, path, "train_labels");
    d.idx_test_images = req_str(j, path, "test_images");
    d.idx_test_labels = req_str(j, path, "test_labels");
  } else if (d.kind == "csv") {
    check_keys(j, path, {"kind", "standardize", "train", "test"});
    d.csv_train = req_str(j, path, "train");
    d.csv_test = req_str(j, path, "test");
  } else {
    fail(path + ".kind", "unknown dataset kind \"" + d.kind + "\"");
  }
  return d;
}

TemplateLayer parse_layer(const json& j, const std::string& path) {
  expect_object(j, path);
  TemplateLayer t;
  t.kind = req_str(j, path, "kind");
  if (t.kind == "conv") {
    check_keys(j, path, {"kind", "channels", "kernel", "stride", "pad"});
    t.channels = req_int(j, path, "channels", 1, 1 << 16);
    t.kernel = get_int(j, path, "kernel", 3, 1, 63);
    t.stride = get_int(j, path, "stride", 1, 1, 63);
    t.pad = get_int(j, path, "pad", 0, 0, 63);
  } else if (t.kind == "dense") {
    check_keys(j, path, {"kind", "features"});
    t.channels = req_int(j, path, "features", 1, 1 << 20);
  } else if (t.kind == "relu" || t.kind == "norm" || t.kind == "norm_relu") {
    check_keys(j, path, {"kind"});
  } else if (t.kind == "maxpool" || t.kind == "avgpool") {
    check_keys(j, path, {"kind", "window"});
    t.window = get_int(j, path, "window", 2, 1, 64);
  } else {
    fail(path + ".kind", "unknown layer kind \"" + t.kind + "\"");
  }
  return t;
}

MnConfig parse_mn(const json& j, const std::string& path) {
  MnConfig m;
  m.K = get_int(j, path, "k", m.K, 1, 256);
  m.em_iters = get_int(j, path, "em_iters", m.em_iters, 0, 1000);
  m.kmeans_iters = get_int(j, path, "kmeans_iters", m.kmeans_iters, -1, 1000);
  m.subsample_fraction =
      get_num(j, path, "subsample", m.subsample_fraction, 1e-6, 1.0);
  m.prune_threshold =
      get_num(j, path, "prune_threshold", m.prune_threshold, 0.0, 0.999);
  m.seed_trials = get_int(j, path, "seed_trials", m.seed_trials, -1, 1000);
  m.eps = get_num(j, path, "eps", m.eps, 1e-300, 1.0);
  std::string affine = get_str(j, path, "affine", "per_component");
  if (affine == "per_component")
    m.affine = AffineMode::per_component;
  else if (affine == "post_aggregate")
    m.affine = AffineMode::post_aggregate;
  else
    fail(path + ".affine", "expected per_component or post_aggregate");
  return m;
}

VariantConfig parse_variant(const json& j, const std::string& path) {
  expect_object(j, path);
  check_keys(j, path,
             {"name", "norm", "k", "em_iters", "kmeans_iters", "subsample",
              "prune_threshold", "seed_trials", "eps", "affine",
              "queue_capacity", "queue_zeta"});
  VariantConfig v;
  v.name = req_str(j, path, "name");
  v.norm = req_str(j, path, "norm");
  if (v.norm != "bn" && v.norm != "mn" && v.norm != "mn_relu")
    fail(path + ".norm", "expected bn, mn, or mn_relu");
  v.mn = parse_mn(j, path);
  v.queue_capacity = get_int(j, path, "queue_capacity", 10, 1, 1000);
  v.queue_zeta = get_num(j, path, "queue_zeta", 0.9, 1e-6, 1.0 - 1e-9);
  return v;
}

OptimizerConfig parse_optimizer(const json& j, const std::string& path) {
  expect_object(j, path);
  check_keys(j, path,
             {"kind", "lr", "momentum", "weight_decay", "schedule",
              "decay_rate", "decay_every", "step_fractions", "step_factor"});
  OptimizerConfig o;
  std::string kind = get_str(j, path, "kind", "rmsprop");
  if (kind == "sgd")
    o.kind = OptimizerKind::sgd;
  else if (kind == "sgd_momentum")
    o.kind = OptimizerKind::sgd_momentum;
  else if (kind == "nesterov")
    o.kind = OptimizerKind::nesterov;
  else if (kind == "rmsprop")
    o.kind = OptimizerKind::rmsprop;
  else
    fail(path + ".kind", "unknown optimizer \"" + kind + "\"");
  o.lr = get_num(j, path, "lr", o.lr, 1e-12, 1e3);
  o.momentum = get_num(j, path, "momentum", o.momentum, 0.0, 1.0 - 1e-9);
  o.weight_decay = get_num(j, path, "weight_decay", o.weight_decay, 0.0, 1.0);
  std::string sched = get_str(j, path, "schedule", "constant");
  if (sched == "constant")
    o.schedule = Schedule::constant;
  else if (sched == "exponential")
    o.schedule = Schedule::exponential;
  else if (sched == "steps")
    o.schedule = Schedule::steps;
  else
    fail(path + ".schedule", "expected constant, exponential, or steps");
  o.decay_rate = get_num(j, path, "decay_rate", o.decay_rate, 1e-6, 1.0);
  o.decay_every = get_int(j, path, "decay_every", o.decay_every, 1, 1 << 20);
  if (j.contains("step_fractions")) {
    if (!j["step_fractions"].is_array())
      fail(path + ".step_fractions", "expected an array");
    for (size_t i = 0; i < j["step_fractions"].size(); ++i) {
      const json& f = j["step_fractions"][i];
      std::string fp = path + ".step_fractions[" + std::to_string(i) + "]";
      if (!f.is_number()) fail(fp, "expected a number");
      double x = f.get<double>();
      if (!(x > 0.0 && x < 1.0)) fail(fp, "expected a fraction in (0, 1)");
      o.step_fractions.push_back(x);
    }
  }
  o.step_factor = get_num(j, path, "step_factor", o.step_factor, 1.0 + 1e-9, 1e6);
  return o;
}

}  // namespace

ExperimentConfig parse_experiment(const nlohmann::json& doc) {
  expect_object(doc, "config");
  check_keys(doc, "config",
             {"name", "dataset", "network", "variants", "optimizer", "epochs",
              "batch_size", "seeds"});
  ExperimentConfig cfg;
  cfg.raw = doc;
  cfg.name = req_str(doc, "config", "name");
  if (!doc.contains("dataset")) fail("config", "missing key \"dataset\"");
  cfg.dataset = parse_dataset(doc["dataset"], "config.dataset");

  if (!doc.contains("network") || !doc["network"].is_array() ||
      doc["network"].empty())
    fail("config.network", "expected a non-empty array");
  for (size_t i = 0; i < doc["network"].size(); ++i)
    cfg.network.push_back(parse_layer(
        doc["network"][i], "config.network[" + std::to_string(i) + "]"));

  if (!doc.contains("variants") || !doc["variants"].is_array() ||
      doc["variants"].empty())
    fail("config.variants", "expected a non-empty array");
  std::set<std::string> names;
  for (size_t i = 0; i < doc["variants"].size(); ++i) {
    VariantConfig v = parse_variant(
        doc["variants"][i], "config.variants[" + std::to_string(i) + "]");
    if (!names.insert(v.name).second)
      fail("config.variants[" + std::to_string(i) + "].name",
           "duplicate variant name \"" + v.name + "\"");
    cfg.variants.push_back(std::move(v));
  }

  if (doc.contains("optimizer"))
    cfg.optimizer = parse_optimizer(doc["optimizer"], "config.optimizer");
  cfg.epochs = get_int(doc, "config", "epochs", cfg.epochs, 1, 1 << 20);
  cfg.batch_size = get_int(doc, "config", "batch_size", cfg.batch_size, 1, 1 << 20);

  if (!doc.contains("seeds")) fail("config", "missing key \"seeds\"");
  if (!doc["seeds"].is_array() || doc["seeds"].empty())
    fail("config.seeds", "expected a non-empty array");
  for (size_t i = 0; i < doc["seeds"].size(); ++i) {
    const json& s = doc["seeds"][i];
    std::string sp = "config.seeds[" + std::to_string(i) + "]";
    if (!s.is_number_integer()) fail(sp, "expected an integer");
    long long v = s.get<long long>();
    if (v < 0) fail(sp, "expected a non-negative integer");
    cfg.seeds.push_back(static_cast<uint64_t>(v));
  }
  return cfg;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_experiment(doc);
}

std::vector<LayerSpec> instantiate_layers(const ExperimentConfig& cfg,
                                          const VariantConfig& v,
                                          int num_classes) {
  std::vector<LayerSpec> out;
  for (const TemplateLayer& t : cfg.network) {
    if (t.kind == "conv") {
      out.push_back(LayerSpec::conv(t.channels, t.kernel, t.stride, t.pad));
    } else if (t.kind == "dense") {
      out.push_back(LayerSpec::dense(t.channels));
    } else if (t.kind == "relu") {
      out.push_back(LayerSpec::relu());
    } else if (t.kind == "maxpool") {
      out.push_back(LayerSpec::maxpool(t.window));
    } else if (t.kind == "avgpool") {
      out.push_back(LayerSpec::avgpool(t.window));
    } else if (t.kind == "norm") {
      if (v.norm == "bn")
        out.push_back(LayerSpec::bn());
      else
        out.push_back(LayerSpec::mn(v.mn));
    } else if (t.kind == "norm_relu") {
      if (v.norm == "bn") {
        out.push_back(LayerSpec::bn());
        out.push_back(LayerSpec::relu());
      } else if (v.norm == "mn") {
        out.push_back(LayerSpec::mn(v.mn));
        out.push_back(LayerSpec::relu());
      } else {
        out.push_back(LayerSpec::mn_relu(v.mn));
      }
    } else {
      throw ConfigError("instantiate_layers: unknown template kind \"" +
                        t.kind + "\"");
    }
  }
  out.push_back(LayerSpec::dense(num_classes));
  return out;
}

void configure_queues(Network& net, const VariantConfig& v) {
  for (Layer& l : net.layers())
    if (l.spec.kind == LayerKind::mn || l.spec.kind == LayerKind::mn_relu) {
      l.queue.capacity = v.queue_capacity;
      l.queue.zeta = v.queue_zeta;
    }
}

SplitData make_splits(const DatasetConfig& d, uint64_t seed) {
  SplitData s;
  if (d.kind == "rectified_gmm") {
    s.train = gen_rectified_gmm(d.rect, d.n_train, seed, 0);
    s.test = gen_rectified_gmm(d.rect, d.n_test, seed, 1);
  } else if (d.kind == "blobs") {
    s.train = gen_blobs(d.blobs, d.n_train, seed, 0);
    s.test = gen_blobs(d.blobs, d.n_test, seed, 1);
  } else if (d.kind == "spirals") {
    s.train = gen_spirals(d.spirals, d.n_train, seed, 0);
    s.test = gen_spirals(d.spirals, d.n_test, seed, 1);
  } else if (d.kind == "images") {
    s.train = gen_images(d.images, d.n_train, seed, 0);
    s.test = gen_images(d.images, d.n_test, seed, 1);
  } else if (d.kind == "idx") {
    s.train = load_images(d.idx_train_images, d.idx_train_labels);
    s.test = load_images(d.idx_test_images, d.idx_test_labels);
  } else if (d.kind == "csv") {
    s.train = load_csv(d.csv_train);
    s.test = load_csv(d.csv_test);
  } else {
    throw ConfigError("make_splits: unknown dataset kind \"" + d.kind + "\"");
  }
  int classes = std::max(s.train.num_classes, s.test.num_classes);
  s.train.num_classes = classes;
  s.test.num_classes = classes;
  if (d.standardize) {
    ChannelStats stats = channel_stats(s.train.x);
    standardize(s.train.x, stats);
    standardize(s.test.x, stats);
  }
  return s;
}

std::vector<int> sample_shape(const Dataset& d) {
  if (d.x.dim() == 2) return {d.x.extent(1)};
  if (d.x.dim() == 4) return {d.x.extent(1), d.x.extent(2), d.x.extent(3)};
  throw ConfigError("sample_shape: dataset tensor must be 2-D or 4-D");
}

}  // namespace mixnorm
