#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "mixnorm/bench.hpp"
#include "mixnorm/metrics.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int call_cli(std::initializer_list<std::string> args) {
  std::vector<std::string> storage{"mixbench"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  return mixnorm::cli_main(static_cast<int>(argv.size()), argv.data());
}

struct EnvGuard {
  std::string key;
  EnvGuard(const std::string& k, const std::string& v) : key(k) {
    setenv(k.c_str(), v.c_str(), 1);
  }
  ~EnvGuard() { unsetenv(key.c_str()); }
};

json mini_config() {
  return json{
      {"name", "demo"},
      {"dataset",
       {{"kind", "rectified_gmm"}, {"n_train", 192}, {"n_test", 96},
        {"classes", 3}, {"dim", 8}, {"hidden", 4}}},
      {"network",
       {{{"kind", "dense"}, {"features", 16}}, {{"kind", "norm_relu"}}}},
      {"variants",
       {{{"name", "bn"}, {"norm", "bn"}},
        {{"name", "mn"}, {"norm", "mn"}, {"k", 2}, {"em_iters", 1},
         {"subsample", 0.5}}}},
      {"optimizer", {{"kind", "sgd"}, {"lr", 0.05}}},
      {"epochs", 2},
      {"batch_size", 64},
      {"seeds", {1}}};
}

fs::path write_config(const fs::path& dir, const json& doc) {
  fs::path p = dir / "exp.json";
  mixtest::write_text(p, doc.dump(2));
  return p;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("help and usage errors") {
  CHECK(call_cli({"--help"}) == 0);
  CHECK(call_cli({}) == 1);
  CHECK(call_cli({"frobnicate"}) == 1);
  CHECK(call_cli({"run"}) == 1);  // missing required config argument
}

TEST_CASE("run produces metrics, checkpoints, summary, and plot") {
  auto dir = mixtest::fresh_dir("cli_run");
  auto cfg = write_config(dir, mini_config());
  auto out = dir / "out";
  REQUIRE(call_cli({"run", cfg.string(), "--out", out.string()}) == 0);

  for (const char* stem : {"demo-bn-s1", "demo-mn-s1"}) {
    CAPTURE(stem);
    CHECK(fs::exists(out / (std::string(stem) + ".csv")));
    CHECK(fs::exists(out / (std::string(stem) + ".wall.csv")));
    CHECK(fs::exists(out / (std::string(stem) + "-ckpt_mid.json")));
    CHECK(fs::exists(out / (std::string(stem) + "-ckpt_final.json")));
  }
  CHECK(fs::exists(out / "demo.svg"));

  auto rec = mixnorm::read_metrics_csv((out / "demo-bn-s1.csv").string());
  REQUIRE(rec.rows.size() == 2);  // one eval per epoch
  CHECK(rec.rows[0].variant == "bn");
  CHECK(rec.rows[0].seed == 1);
  CHECK(rec.rows[0].epoch == 0);
  CHECK(rec.rows[1].epoch == 1);
  CHECK(rec.rows[1].step == 6);  // 3 batches of 64 per epoch
  CHECK(rec.wall_seconds.size() == 2);

  std::ifstream in(out / "summary.json");
  REQUIRE(in.good());
  json summary;
  in >> summary;
  CHECK(summary["format"] == "mixnorm-summary v1");
  CHECK(summary["experiment"] == "demo");
  CHECK(summary["variants"].contains("bn"));
  CHECK(summary["variants"].contains("mn"));
  CHECK(summary["variants"]["mn"]["steps_to_reference_best"]["reference"] ==
        "bn");

  SUBCASE("analyze reads a checkpoint back") {
    auto ckpt = out / "demo-mn-s1-ckpt_final.json";
    auto adir = dir / "analysis";
    REQUIRE(call_cli({"analyze", ckpt.string(), "--layer", "1", "--out",
                      adir.string()}) == 0);
    CHECK(fs::exists(adir / "analysis.json"));
    bool any_channel = false;
    for (const auto& entry : fs::directory_iterator(adir)) {
      auto name = entry.path().filename().string();
      if (name.rfind("channel_", 0) == 0 &&
          entry.path().extension() == ".svg")
        any_channel = true;
    }
    CHECK(any_channel);

    std::ifstream ain(adir / "analysis.json");
    json analysis;
    ain >> analysis;
    CHECK(analysis["format"] == "mixnorm-analysis v1");
    CHECK(analysis["channels"].size() > 0);

    CHECK(call_cli({"analyze", ckpt.string(), "--layer", "99", "--out",
                    (dir / "a99").string()}) == 1);
  }

  SUBCASE("plot renders existing CSVs") {
    auto svg = dir / "curves.svg";
    REQUIRE(call_cli({"plot", (out / "demo-bn-s1.csv").string(),
                      (out / "demo-mn-s1.csv").string(), "--out",
                      svg.string()}) == 0);
    auto text = mixtest::read_text(svg);
    CHECK(text.find("<svg") != std::string::npos);
    CHECK(text.find(">bn</text>") != std::string::npos);  // legend label
    CHECK(text.find(">mn</text>") != std::string::npos);
  }
}

TEST_CASE("MIXNORM_SEED overrides the seed list") {
  auto dir = mixtest::fresh_dir("cli_seed");
  auto cfg = write_config(dir, mini_config());
  auto out = dir / "out";
  {
    EnvGuard env("MIXNORM_SEED", "7");
    REQUIRE(call_cli({"run", cfg.string(), "--out", out.string()}) == 0);
  }
  CHECK(fs::exists(out / "demo-bn-s7.csv"));
  CHECK(!fs::exists(out / "demo-bn-s1.csv"));

  {
    EnvGuard env("MIXNORM_SEED", "abc");
    CHECK(call_cli({"run", cfg.string(), "--out",
                    (dir / "out2").string()}) == 1);
  }
}

TEST_CASE("run rejects broken configs and unusable output paths") {
  auto dir = mixtest::fresh_dir("cli_bad");
  CHECK(call_cli({"run", (dir / "absent.json").string()}) == 1);

  mixtest::write_text(dir / "broken.json", "{\"name\":");
  CHECK(call_cli({"run", (dir / "broken.json").string()}) == 1);

  auto unknown = mini_config();
  unknown["typo"] = 1;
  CHECK(call_cli({"run", write_config(dir, unknown).string()}) == 1);

  auto cfg = write_config(dir, mini_config());
  mixtest::write_text(dir / "blocker", "not a directory");
  CHECK(call_cli({"run", cfg.string(), "--out",
                  (dir / "blocker").string()}) == 2);
}

TEST_CASE("analyze and plot surface runtime failures") {
  auto dir = mixtest::fresh_dir("cli_rt");
  CHECK(call_cli({"analyze", (dir / "no.json").string(), "--layer", "0"}) ==
        2);
  CHECK(call_cli({"plot", (dir / "no.csv").string(), "--out",
                  (dir / "o.svg").string()}) == 2);
  CHECK(call_cli({"plot", (dir / "no.csv").string(), "--window", "0"}) == 1);
}

}  // TEST_SUITE
