#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "helpers.hpp"
#include "mixnorm/config.hpp"
#include "mixnorm/net.hpp"

using json = nlohmann::json;
using mixnorm::AffineMode;
using mixnorm::ConfigError;
using mixnorm::configure_queues;
using mixnorm::instantiate_layers;
using mixnorm::LayerKind;
using mixnorm::load_experiment;
using mixnorm::make_splits;
using mixnorm::Network;
using mixnorm::OptimizerKind;
using mixnorm::parse_experiment;
using mixnorm::sample_shape;
using mixnorm::Schedule;

namespace {

json base_doc() {
  return json{
      {"name", "demo"},
      {"dataset",
       {{"kind", "rectified_gmm"}, {"n_train", 64}, {"n_test", 32},
        {"classes", 3}, {"dim", 6}, {"hidden", 4}}},
      {"network",
       {{{"kind", "dense"}, {"features", 16}}, {{"kind", "norm_relu"}}}},
      {"variants",
       {{{"name", "bn"}, {"norm", "bn"}},
        {{"name", "mn"}, {"norm", "mn"}, {"k", 2}}}},
      {"seeds", {1, 2}}};
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("a full document lands in every field") {
  json doc = base_doc();
  doc["dataset"] = {{"kind", "rectified_gmm"},  {"standardize", false},
                    {"n_train", 128},           {"n_test", 48},
                    {"classes", 5},             {"dim", 12},
                    {"hidden", 7},              {"sigma", 0.8},
                    {"anchor_spread", 2.5},     {"anchor_shift", 0.3},
                    {"unit_weights", true}};
  doc["network"] = {{{"kind", "conv"}, {"channels", 8}, {"kernel", 5},
                     {"stride", 2}, {"pad", 2}},
                    {{"kind", "norm"}},
                    {{"kind", "relu"}},
                    {{"kind", "maxpool"}, {"window", 3}},
                    {{"kind", "avgpool"}, {"window", 2}},
                    {{"kind", "dense"}, {"features", 24}},
                    {{"kind", "norm_relu"}}};
  doc["variants"] = {{{"name", "mix"},
                      {"norm", "mn_relu"},
                      {"k", 4},
                      {"em_iters", 3},
                      {"kmeans_iters", 2},
                      {"subsample", 0.5},
                      {"prune_threshold", 0.02},
                      {"seed_trials", 3},
                      {"eps", 1e-4},
                      {"affine", "post_aggregate"},
                      {"queue_capacity", 6},
                      {"queue_zeta", 0.8}}};
  doc["optimizer"] = {{"kind", "sgd_momentum"},
                      {"lr", 0.05},
                      {"momentum", 0.8},
                      {"weight_decay", 1e-4},
                      {"schedule", "steps"},
                      {"step_fractions", {0.5, 0.75}},
                      {"step_factor", 5.0}};
  doc["epochs"] = 6;
  doc["batch_size"] = 32;
  doc["seeds"] = {3, 5, 8};

  auto cfg = parse_experiment(doc);
  CHECK(cfg.name == "demo");
  CHECK(cfg.dataset.kind == "rectified_gmm");
  CHECK(cfg.dataset.standardize == false);
  CHECK(cfg.dataset.n_train == 128);
  CHECK(cfg.dataset.n_test == 48);
  CHECK(cfg.dataset.rect.classes == 5);
  CHECK(cfg.dataset.rect.dim == 12);
  CHECK(cfg.dataset.rect.hidden == 7);
  CHECK(cfg.dataset.rect.sigma == doctest::Approx(0.8));
  CHECK(cfg.dataset.rect.anchor_spread == doctest::Approx(2.5));
  CHECK(cfg.dataset.rect.anchor_shift == doctest::Approx(0.3));
  CHECK(cfg.dataset.rect.unit_weights == true);

  REQUIRE(cfg.network.size() == 7);
  CHECK(cfg.network[0].kind == "conv");
  CHECK(cfg.network[0].channels == 8);
  CHECK(cfg.network[0].kernel == 5);
  CHECK(cfg.network[0].stride == 2);
  CHECK(cfg.network[0].pad == 2);
  CHECK(cfg.network[3].window == 3);
  CHECK(cfg.network[5].channels == 24);

  REQUIRE(cfg.variants.size() == 1);
  const auto& v = cfg.variants[0];
  CHECK(v.name == "mix");
  CHECK(v.norm == "mn_relu");
  CHECK(v.mn.K == 4);
  CHECK(v.mn.em_iters == 3);
  CHECK(v.mn.kmeans_iters == 2);
  CHECK(v.mn.subsample_fraction == doctest::Approx(0.5));
  CHECK(v.mn.prune_threshold == doctest::Approx(0.02));
  CHECK(v.mn.seed_trials == 3);
  CHECK(v.mn.eps == doctest::Approx(1e-4));
  CHECK(v.mn.affine == AffineMode::post_aggregate);
  CHECK(v.queue_capacity == 6);
  CHECK(v.queue_zeta == doctest::Approx(0.8));

  CHECK(cfg.optimizer.kind == OptimizerKind::sgd_momentum);
  CHECK(cfg.optimizer.lr == doctest::Approx(0.05));
  CHECK(cfg.optimizer.momentum == doctest::Approx(0.8));
  CHECK(cfg.optimizer.weight_decay == doctest::Approx(1e-4));
  CHECK(cfg.optimizer.schedule == Schedule::steps);
  REQUIRE(cfg.optimizer.step_fractions.size() == 2);
  CHECK(cfg.optimizer.step_fractions[1] == doctest::Approx(0.75));
  CHECK(cfg.optimizer.step_factor == doctest::Approx(5.0));

  CHECK(cfg.epochs == 6);
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.seeds == std::vector<uint64_t>{3, 5, 8});
  CHECK(cfg.raw == doc);
}

TEST_CASE("omitted sections fall back to defaults") {
  auto cfg = parse_experiment(base_doc());
  CHECK(cfg.epochs == 10);
  CHECK(cfg.batch_size == 128);
  CHECK(cfg.optimizer.kind == OptimizerKind::rmsprop);
  CHECK(cfg.optimizer.lr == doctest::Approx(1e-3));
  CHECK(cfg.optimizer.schedule == Schedule::constant);
  CHECK(cfg.dataset.standardize == true);
  CHECK(cfg.variants[0].mn.K == 3);
  CHECK(cfg.variants[0].mn.em_iters == 2);
  CHECK(cfg.variants[1].mn.K == 2);
  CHECK(cfg.variants[1].queue_capacity == 10);
  CHECK(cfg.variants[1].queue_zeta == doctest::Approx(0.9));
}

TEST_CASE("unknown keys are rejected with a dotted path") {
  auto top = base_doc();
  top["surprise"] = 1;
  CHECK_THROWS_WITH_AS(parse_experiment(top),
                       doctest::Contains("config.surprise"), ConfigError);

  auto ds = base_doc();
  ds["dataset"]["oops"] = true;
  CHECK_THROWS_WITH_AS(parse_experiment(ds),
                       doctest::Contains("config.dataset.oops"), ConfigError);

  auto net = base_doc();
  net["network"][0]["pad"] = 1;  // dense layers take no pad
  CHECK_THROWS_WITH_AS(parse_experiment(net),
                       doctest::Contains("config.network[0].pad"), ConfigError);

  auto var = base_doc();
  var["variants"][1]["gamma"] = 0.5;
  CHECK_THROWS_WITH_AS(parse_experiment(var),
                       doctest::Contains("config.variants[1].gamma"),
                       ConfigError);

  auto opt = base_doc();
  opt["optimizer"] = {{"kind", "sgd"}, {"beta", 0.9}};
  CHECK_THROWS_WITH_AS(parse_experiment(opt),
                       doctest::Contains("config.optimizer.beta"), ConfigError);
}

TEST_CASE("invalid values are rejected") {
  auto d = base_doc();
  d["dataset"]["kind"] = "parquet";
  CHECK_THROWS_WITH_AS(parse_experiment(d), doctest::Contains("dataset.kind"),
                       ConfigError);

  auto l = base_doc();
  l["network"][0]["kind"] = "attention";
  CHECK_THROWS_AS(parse_experiment(l), ConfigError);

  auto n = base_doc();
  n["variants"][0]["norm"] = "ln";
  CHECK_THROWS_WITH_AS(parse_experiment(n), doctest::Contains("norm"),
                       ConfigError);

  auto a = base_doc();
  a["variants"][1]["affine"] = "both";
  CHECK_THROWS_WITH_AS(parse_experiment(a), doctest::Contains("affine"),
                       ConfigError);

  auto o = base_doc();
  o["optimizer"] = {{"kind", "adam"}};
  CHECK_THROWS_AS(parse_experiment(o), ConfigError);

  auto s = base_doc();
  s["optimizer"] = {{"schedule", "cosine"}};
  CHECK_THROWS_WITH_AS(parse_experiment(s), doctest::Contains("schedule"),
                       ConfigError);

  auto e = base_doc();
  e["epochs"] = 0;
  CHECK_THROWS_WITH_AS(parse_experiment(e), doctest::Contains("epochs"),
                       ConfigError);

  auto v = base_doc();
  v["variants"] = json::array();
  CHECK_THROWS_WITH_AS(parse_experiment(v), doctest::Contains("variants"),
                       ConfigError);

  auto dup = base_doc();
  dup["variants"][1]["name"] = "bn";
  CHECK_THROWS_WITH_AS(parse_experiment(dup), doctest::Contains("duplicate"),
                       ConfigError);

  auto lr = base_doc();
  lr["optimizer"] = {{"lr", -0.1}};
  CHECK_THROWS_WITH_AS(parse_experiment(lr), doctest::Contains("lr"),
                       ConfigError);

  auto f = base_doc();
  f["optimizer"] = {{"step_fractions", {0.5, 1.5}}};
  CHECK_THROWS_WITH_AS(parse_experiment(f),
                       doctest::Contains("step_fractions[1]"), ConfigError);

  auto seeds = base_doc();
  seeds["seeds"] = {1, -2};
  CHECK_THROWS_WITH_AS(parse_experiment(seeds), doctest::Contains("seeds[1]"),
                       ConfigError);

  auto fseed = base_doc();
  fseed["seeds"] = {1.5};
  CHECK_THROWS_AS(parse_experiment(fseed), ConfigError);

  auto noseed = base_doc();
  noseed.erase("seeds");
  CHECK_THROWS_AS(parse_experiment(noseed), ConfigError);
}

TEST_CASE("placeholders expand per variant and the classifier is appended") {
  json doc = base_doc();
  doc["network"] = {{{"kind", "conv"}, {"channels", 8}, {"kernel", 3},
                     {"stride", 1}, {"pad", 1}},
                    {{"kind", "norm"}},
                    {{"kind", "relu"}},
                    {{"kind", "maxpool"}, {"window", 2}},
                    {{"kind", "dense"}, {"features", 32}},
                    {{"kind", "norm_relu"}}};
  doc["variants"] = {{{"name", "bn"}, {"norm", "bn"}},
                     {{"name", "mn"}, {"norm", "mn"}, {"k", 4}},
                     {{"name", "mnr"}, {"norm", "mn_relu"}, {"k", 5}}};
  auto cfg = parse_experiment(doc);

  auto bn = instantiate_layers(cfg, cfg.variants[0], 7);
  REQUIRE(bn.size() == 8);
  CHECK(bn[0].kind == LayerKind::conv);
  CHECK(bn[0].channels == 8);
  CHECK(bn[0].kernel == 3);
  CHECK(bn[0].pad == 1);
  CHECK(bn[1].kind == LayerKind::bn);
  CHECK(bn[2].kind == LayerKind::relu);
  CHECK(bn[3].kind == LayerKind::maxpool);
  CHECK(bn[4].kind == LayerKind::dense);
  CHECK(bn[5].kind == LayerKind::bn);
  CHECK(bn[6].kind == LayerKind::relu);
  CHECK(bn[7].kind == LayerKind::dense);
  CHECK(bn[7].channels == 7);

  auto mn = instantiate_layers(cfg, cfg.variants[1], 7);
  REQUIRE(mn.size() == 8);
  CHECK(mn[1].kind == LayerKind::mn);
  CHECK(mn[1].mn_cfg.K == 4);
  CHECK(mn[5].kind == LayerKind::mn);
  CHECK(mn[6].kind == LayerKind::relu);

  auto mnr = instantiate_layers(cfg, cfg.variants[2], 7);
  REQUIRE(mnr.size() == 7);  // norm_relu fuses into one layer
  CHECK(mnr[1].kind == LayerKind::mn);
  CHECK(mnr[1].mn_cfg.K == 5);
  CHECK(mnr[5].kind == LayerKind::mn_relu);
  CHECK(mnr[6].kind == LayerKind::dense);
}

TEST_CASE("queue settings reach mixture layers only") {
  json doc = base_doc();
  doc["variants"] = {{{"name", "mn"},
                      {"norm", "mn"},
                      {"k", 2},
                      {"queue_capacity", 4},
                      {"queue_zeta", 0.5}}};
  auto cfg = parse_experiment(doc);
  auto specs = instantiate_layers(cfg, cfg.variants[0], 3);
  specs.insert(specs.begin(), mixnorm::LayerSpec::bn());
  Network net({6}, specs, 1);
  configure_queues(net, cfg.variants[0]);

  CHECK(net.layers()[0].queue.capacity == 10);  // bn layer untouched
  bool saw_mn = false;
  for (const auto& l : net.layers())
    if (l.spec.kind == LayerKind::mn || l.spec.kind == LayerKind::mn_relu) {
      saw_mn = true;
      CHECK(l.queue.capacity == 4);
      CHECK(l.queue.zeta == doctest::Approx(0.5));
    }
  CHECK(saw_mn);
}

TEST_CASE("make_splits generates both splits and standardizes with train stats") {
  auto cfg = parse_experiment(base_doc());
  auto s = make_splits(cfg.dataset, 11);
  REQUIRE(s.train.x.dim() == 2);
  CHECK(s.train.x.extent(0) == 64);
  CHECK(s.train.x.extent(1) == 6);
  CHECK(s.test.x.extent(0) == 32);
  CHECK(s.train.num_classes == s.test.num_classes);
  CHECK(sample_shape(s.train) == std::vector<int>{6});

  // Standardization used the train split's statistics.
  for (int c = 0; c < 6; ++c) {
    double mean = 0.0, sq = 0.0;
    for (int i = 0; i < 64; ++i) {
      mean += s.train.x(i, c);
      sq += s.train.x(i, c) * s.train.x(i, c);
    }
    mean /= 64.0;
    sq /= 64.0;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(sq - mean * mean - 1.0) < 1e-6);
  }
}

TEST_CASE("csv datasets load through make_splits") {
  auto dir = mixtest::fresh_dir("cfg_csv");
  mixtest::write_text(dir / "train.csv", "0,1,2\n1,3,4\n2,5,6\n0,7,8\n");
  mixtest::write_text(dir / "test.csv", "1,0,1\n2,2,3\n");
  json doc = base_doc();
  doc["dataset"] = {{"kind", "csv"},
                    {"train", (dir / "train.csv").string()},
                    {"test", (dir / "test.csv").string()},
                    {"standardize", false}};
  auto cfg = parse_experiment(doc);
  auto s = make_splits(cfg.dataset, 1);
  CHECK(s.train.x.extent(0) == 4);
  CHECK(s.train.x.extent(1) == 2);
  CHECK(s.train.x(1, 0) == 3.0);
  CHECK(s.test.y == std::vector<int>{1, 2});
  CHECK(s.train.num_classes == 3);

  json missing = doc;
  missing["dataset"]["train"] = (dir / "absent.csv").string();
  auto bad = parse_experiment(missing);
  CHECK_THROWS_AS(make_splits(bad.dataset, 1), std::runtime_error);
}

TEST_CASE("image datasets report a 4-D sample shape") {
  json doc = base_doc();
  doc["dataset"] = {{"kind", "images"}, {"n_train", 8}, {"n_test", 4},
                    {"classes", 2}, {"channels", 2}, {"height", 8},
                    {"width", 6}};
  auto cfg = parse_experiment(doc);
  auto s = make_splits(cfg.dataset, 5);
  CHECK(sample_shape(s.train) == std::vector<int>{2, 8, 6});
}

TEST_CASE("load_experiment reports file-level problems") {
  auto dir = mixtest::fresh_dir("cfg_file");
  auto good = dir / "exp.json";
  mixtest::write_text(good, base_doc().dump(2));
  auto cfg = load_experiment(good.string());
  CHECK(cfg.name == "demo");

  CHECK_THROWS_WITH_AS(load_experiment((dir / "absent.json").string()),
                       doctest::Contains("cannot open"), ConfigError);

  mixtest::write_text(dir / "broken.json", "{\"name\": ");
  CHECK_THROWS_AS(load_experiment((dir / "broken.json").string()), ConfigError);
}

}  // TEST_SUITE
