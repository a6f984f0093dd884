#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "mixnorm/metrics.hpp"
#include "mixnorm/rng.hpp"

using mixnorm::analyze_distribution;
using mixnorm::ChannelAnalysis;
using mixnorm::emit_plots;
using mixnorm::metrics_wall_path;
using mixnorm::PlotOptions;
using mixnorm::read_metrics_csv;
using mixnorm::Rng;
using mixnorm::RunRecord;
using mixnorm::RunRow;
using mixnorm::Tensor;
using mixnorm::write_metrics_csv;

namespace {

RunRecord sample_record(bool with_wall) {
  RunRecord rec;
  for (int i = 0; i < 4; ++i) {
    RunRow row;
    row.run_id = "exp-mn-s1";
    row.variant = "mn";
    row.seed = 1;
    row.step = 10 * (i + 1);
    row.epoch = i;
    row.train_loss = 1.0 / 3.0 + i;
    row.test_loss = 1e-300;
    row.test_acc = i == 0 ? -0.0 : 0.25 * i;
    row.effective_k = {3, 2};
    rec.rows.push_back(row);
    if (with_wall) rec.wall_seconds.push_back(0.125 * (i + 1));
  }
  return rec;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("wall path naming") {
  CHECK(metrics_wall_path("runs/a.csv") == "runs/a.wall.csv");
  CHECK(metrics_wall_path("noext") == "noext.wall.csv");
}

TEST_CASE("round trip preserves every value exactly") {
  auto dir = mixtest::fresh_dir("metrics_rt");
  auto path = (dir / "run.csv").string();
  RunRecord rec = sample_record(true);
  write_metrics_csv(path, rec);

  RunRecord got = read_metrics_csv(path);
  REQUIRE(got.rows.size() == rec.rows.size());
  REQUIRE(got.wall_seconds.size() == rec.wall_seconds.size());
  for (size_t i = 0; i < rec.rows.size(); ++i) {
    CHECK(got.rows[i].run_id == rec.rows[i].run_id);
    CHECK(got.rows[i].variant == rec.rows[i].variant);
    CHECK(got.rows[i].seed == rec.rows[i].seed);
    CHECK(got.rows[i].step == rec.rows[i].step);
    CHECK(got.rows[i].epoch == rec.rows[i].epoch);
    CHECK(got.rows[i].train_loss == rec.rows[i].train_loss);
    CHECK(got.rows[i].test_loss == rec.rows[i].test_loss);
    CHECK(got.rows[i].test_acc == rec.rows[i].test_acc);
    CHECK(got.rows[i].effective_k == rec.rows[i].effective_k);
    CHECK(got.wall_seconds[i] == rec.wall_seconds[i]);
  }
}

TEST_CASE("rewriting a parsed file is byte-identical") {
  auto dir = mixtest::fresh_dir("metrics_idem");
  auto p1 = (dir / "a.csv").string();
  auto p2 = (dir / "b.csv").string();
  write_metrics_csv(p1, sample_record(false));
  RunRecord got = read_metrics_csv(p1);
  write_metrics_csv(p2, got);
  CHECK(mixtest::read_text(p1) == mixtest::read_text(p2));
}

TEST_CASE("metrics csv itself carries no timings") {
  auto dir = mixtest::fresh_dir("metrics_wall");
  auto with_wall = (dir / "w.csv").string();
  auto without = (dir / "now.csv").string();
  RunRecord rec = sample_record(true);
  write_metrics_csv(with_wall, rec);
  RunRecord plain = rec;
  plain.wall_seconds.clear();
  write_metrics_csv(without, plain);

  CHECK(mixtest::read_text(with_wall) == mixtest::read_text(without));
  CHECK(std::filesystem::exists(metrics_wall_path(with_wall)));
  CHECK(!std::filesystem::exists(metrics_wall_path(without)));
}

TEST_CASE("validation rejects malformed records") {
  auto dir = mixtest::fresh_dir("metrics_bad");
  RunRecord rec = sample_record(false);
  rec.rows[0].run_id = "has,comma";
  CHECK_THROWS_AS(write_metrics_csv((dir / "x.csv").string(), rec),
                  std::invalid_argument);

  RunRecord mismatch = sample_record(true);
  mismatch.wall_seconds.pop_back();
  CHECK_THROWS_AS(write_metrics_csv((dir / "y.csv").string(), mismatch),
                  std::invalid_argument);
}

TEST_CASE("reader rejects tampered headers and stray wall files") {
  auto dir = mixtest::fresh_dir("metrics_tamper");
  auto path = (dir / "t.csv").string();
  write_metrics_csv(path, sample_record(true));

  std::string text = mixtest::read_text(path);
  mixtest::write_text(dir / "t.csv", "# other tool v9\n" + text);
  CHECK_THROWS_AS(read_metrics_csv(path), std::runtime_error);

  write_metrics_csv(path, sample_record(true));
  std::string wall = mixtest::read_text(metrics_wall_path(path));
  auto cut = wall.rfind("exp");
  mixtest::write_text(metrics_wall_path(path), wall.substr(0, cut));
  CHECK_THROWS_AS(read_metrics_csv(path), std::runtime_error);

  CHECK_THROWS_AS(read_metrics_csv((dir / "missing.csv").string()),
                  std::runtime_error);
}

TEST_CASE("plots render every variant") {
  auto dir = mixtest::fresh_dir("metrics_plot");
  std::vector<RunRecord> runs;
  Rng rng(71);
  for (int seed = 0; seed < 3; ++seed)
    for (const char* variant : {"bn", "mn"}) {
      RunRecord rec;
      for (int e = 0; e < 12; ++e) {
        RunRow row;
        row.run_id = std::string("exp-") + variant + "-s" + std::to_string(seed);
        row.variant = variant;
        row.seed = static_cast<uint64_t>(seed);
        row.step = 50 * (e + 1);
        row.epoch = e;
        row.train_loss = 2.0 * std::exp(-0.3 * e) + rng.uniform(0.0, 0.05);
        row.test_loss = row.train_loss + 0.1;
        row.test_acc = 1.0 - std::exp(-0.25 * e) * 0.7;
        rec.rows.push_back(row);
      }
      runs.push_back(rec);
    }

  auto out = (dir / "curves.svg").string();
  PlotOptions opts;
  opts.window = 3;
  opts.title = "test curves";
  emit_plots(out, runs, opts);
  std::string svg = mixtest::read_text(out);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find("bn") != std::string::npos);
  CHECK(svg.find("mn") != std::string::npos);
  CHECK(svg.find("test curves") != std::string::npos);

  PlotOptions bad;
  bad.window = 0;
  CHECK_THROWS_AS(emit_plots((dir / "bad.svg").string(), runs, bad),
                  std::invalid_argument);
  CHECK_THROWS_AS(emit_plots((dir / "empty.svg").string(), {}, opts),
                  std::invalid_argument);
}

TEST_CASE("bimodal channels prefer two components") {
  Rng rng(72);
  int m = 400;
  Tensor acts({m, 2});
  for (int i = 0; i < m; ++i) {
    double sign = i % 2 == 0 ? -1.0 : 1.0;
    acts(i, 0) = rng.normal(3.0 * sign, 0.5);
    acts(i, 1) = rng.normal(0.0, 1.0);
  }
  auto rows = analyze_distribution(acts, {0, 1}, {2}, 99, 32);
  REQUIRE(rows.size() == 2);

  const ChannelAnalysis& bimodal = rows[0];
  REQUIRE(bimodal.fits.size() == 1);
  CHECK(bimodal.fits[0].k == 2);
  CHECK(bimodal.fits[0].ll > bimodal.gauss_ll + 0.1);

  long long total = 0;
  for (long long c : bimodal.hist_counts) total += c;
  CHECK(total == m);
  REQUIRE(bimodal.hist_edges.size() == bimodal.hist_counts.size() + 1);
  for (size_t i = 1; i < bimodal.hist_edges.size(); ++i)
    CHECK(bimodal.hist_edges[i] > bimodal.hist_edges[i - 1]);

  // near-gaussian channel: the mixture can tie but not lose badly
  const ChannelAnalysis& plain = rows[1];
  CHECK(plain.fits[0].ll >= plain.gauss_ll - 0.05);
}

TEST_CASE("analysis artifacts are written") {
  Rng rng(73);
  Tensor acts({100, 1});
  for (int i = 0; i < 100; ++i) acts(i, 0) = rng.normal(0.0, 1.0);
  auto rows = analyze_distribution(acts, {0}, {2, 3}, 5, 16);
  REQUIRE(rows.size() == 1);
  REQUIRE(rows[0].fits.size() == 2);

  auto dir = mixtest::fresh_dir("metrics_analysis");
  auto jpath = (dir / "analysis.json").string();
  mixnorm::write_analysis_json(jpath, rows);
  auto doc = nlohmann::json::parse(mixtest::read_text(jpath));
  CHECK(doc.at("format").get<std::string>() == "mixnorm-analysis v1");
  REQUIRE(doc.at("channels").size() == 1);
  CHECK(doc["channels"][0].at("channel").get<int>() == 0);

  auto spath = (dir / "channel.svg").string();
  mixnorm::write_analysis_svg(spath, rows[0]);
  std::string svg = mixtest::read_text(spath);
  CHECK(svg.find("<svg") != std::string::npos);
}

}  // TEST_SUITE
