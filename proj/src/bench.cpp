#include "mixnorm/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mixnorm/checkpoint.hpp"
#include "mixnorm/config.hpp"
#include "mixnorm/metrics.hpp"
#include "mixnorm/net.hpp"

namespace mixnorm {

namespace {

namespace fs = std::filesystem;

std::string run_stem(const ExperimentConfig& cfg, const VariantConfig& v,
                     uint64_t seed) {
  return cfg.name + "-" + v.name + "-s" + std::to_string(seed);
}

std::vector<uint64_t> effective_seeds(const ExperimentConfig& cfg,
                                      const std::vector<uint64_t>& override) {
  if (const char* env = std::getenv("MIXNORM_SEED")) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw ConfigError(std::string("MIXNORM_SEED: cannot parse \"") + env +
                        "\"");
    return {static_cast<uint64_t>(v)};
  }
  if (!override.empty()) return override;
  return cfg.seeds;
}

void run_one(const ExperimentConfig& cfg, const VariantConfig& variant,
             uint64_t seed, const fs::path& out_dir) {
  SplitData data = make_splits(cfg.dataset, seed);
  int classes = data.train.num_classes;
  Network net(sample_shape(data.train),
              instantiate_layers(cfg, variant, classes), seed);
  configure_queues(net, variant);

  std::string stem = run_stem(cfg, variant, seed);
  int mid_epoch = (cfg.epochs + 1) / 2 - 1;

  TrainOptions topt;
  topt.epochs = cfg.epochs;
  topt.batch_size = cfg.batch_size;
  topt.optimizer = cfg.optimizer;
  topt.on_eval = [&](const EvalPoint& ep) {
    if (ep.epoch == mid_epoch)
      save_checkpoint((out_dir / (stem + "-ckpt_mid.json")).string(), cfg.raw,
                      variant.name, seed, ep.step, ep.epoch, net);
  };

  TrainResult result =
      net.train(data.train.x, data.train.y, data.test.x, data.test.y, topt);

  const EvalPoint& last = result.evals.back();
  save_checkpoint((out_dir / (stem + "-ckpt_final.json")).string(), cfg.raw,
                  variant.name, seed, last.step, last.epoch, net);

  RunRecord rec;
  for (const EvalPoint& ep : result.evals) {
    RunRow row;
    row.run_id = stem;
    row.variant = variant.name;
    row.seed = seed;
    row.step = ep.step;
    row.epoch = ep.epoch;
    row.train_loss = ep.train_loss;
    row.test_loss = ep.test_loss;
    row.test_acc = ep.test_acc;
    row.effective_k = ep.effective_k;
    rec.rows.push_back(std::move(row));
    rec.wall_seconds.push_back(ep.wall_seconds);
  }
  write_metrics_csv((out_dir / (stem + ".csv")).string(), rec);
  std::cout << stem << ": " << result.evals.size() << " epochs, final acc "
            << last.test_acc << "\n";
}

// Best test accuracy among rows whose epoch lies in the first `frac` of the
// schedule.
double best_acc_by_fraction(const RunRecord& rec, int epochs, double frac) {
  int cutoff = static_cast<int>(std::ceil(frac * epochs));
  double best = 0.0;
  for (const RunRow& r : rec.rows)
    if (r.epoch < cutoff) best = std::max(best, r.test_acc);
  return best;
}

long long first_step_reaching(const RunRecord& rec, double target) {
  for (const RunRow& r : rec.rows)
    if (r.test_acc >= target) return r.step;
  return -1;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Summaries are built from the CSVs on disk, not from in-memory state, so
// they describe exactly what a reader of the run directory would see.
void summarize(const ExperimentConfig& cfg, const std::vector<uint64_t>& seeds,
               const fs::path& out_dir) {
  const VariantConfig* reference = nullptr;
  for (const VariantConfig& v : cfg.variants)
    if (v.norm == "bn") {
      reference = &v;
      break;
    }

  std::map<std::string, std::map<uint64_t, RunRecord>> by_variant;
  for (const VariantConfig& v : cfg.variants)
    for (uint64_t s : seeds)
      by_variant[v.name][s] =
          read_metrics_csv((out_dir / (run_stem(cfg, v, s) + ".csv")).string());

  nlohmann::json summary;
  summary["format"] = "mixnorm-summary v1";
  summary["experiment"] = cfg.name;
  summary["epochs"] = cfg.epochs;
  summary["seeds"] = seeds;

  std::printf("\n%-14s %9s %9s %9s %9s %14s\n", "variant", "acc@25%",
              "acc@50%", "acc@75%", "acc@100%", "steps-ratio");
  for (const VariantConfig& v : cfg.variants) {
    nlohmann::json jv;
    for (double frac : {0.25, 0.5, 0.75, 1.0}) {
      std::vector<double> accs;
      for (uint64_t s : seeds)
        accs.push_back(best_acc_by_fraction(by_variant[v.name][s], cfg.epochs,
                                            frac));
      char key[16];
      std::snprintf(key, sizeof key, "acc_at_%d", static_cast<int>(frac * 100));
      jv[key] = {{"per_seed", accs}, {"median", median(accs)}};
    }

    double ratio = std::nan("");
    if (reference != nullptr) {
      std::vector<double> ratios;
      for (uint64_t s : seeds) {
        const RunRecord& ref = by_variant[reference->name][s];
        double target = best_acc_by_fraction(ref, cfg.epochs, 1.0);
        long long ref_steps = first_step_reaching(ref, target);
        long long var_steps = first_step_reaching(by_variant[v.name][s], target);
        if (ref_steps > 0 && var_steps > 0)
          ratios.push_back(static_cast<double>(var_steps) /
                           static_cast<double>(ref_steps));
      }
      if (ratios.size() * 2 > seeds.size()) ratio = median(ratios);
      jv["steps_to_reference_best"] = {{"reference", reference->name},
                                       {"median_ratio", ratio}};
    }

    summary["variants"][v.name] = jv;
    std::printf("%-14s %9.4f %9.4f %9.4f %9.4f %14.3f\n", v.name.c_str(),
                jv["acc_at_25"]["median"].get<double>(),
                jv["acc_at_50"]["median"].get<double>(),
                jv["acc_at_75"]["median"].get<double>(),
                jv["acc_at_100"]["median"].get<double>(), ratio);
  }

  std::ofstream out(out_dir / "summary.json");
  if (!out) throw std::runtime_error("summary.json: cannot write");
  out << summary.dump(2) << '\n';

  std::vector<RunRecord> all;
  for (const VariantConfig& v : cfg.variants)
    for (uint64_t s : seeds) all.push_back(by_variant[v.name][s]);
  PlotOptions popt;
  popt.title = cfg.name;
  emit_plots((out_dir / (cfg.name + ".svg")).string(), all, popt);
}

int cmd_run(const std::string& config_path,
            const std::vector<uint64_t>& seeds_flag, std::string out_flag) {
  ExperimentConfig cfg = load_experiment(config_path);
  std::vector<uint64_t> seeds = effective_seeds(cfg, seeds_flag);
  fs::path out_dir = out_flag.empty() ? fs::path("runs") / cfg.name
                                      : fs::path(out_flag);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw std::runtime_error(out_dir.string() + ": cannot create directory");

  for (const VariantConfig& v : cfg.variants)
    for (uint64_t s : seeds) run_one(cfg, v, s, out_dir);
  summarize(cfg, seeds, out_dir);
  std::cout << "wrote " << out_dir.string() << "\n";
  return 0;
}

int cmd_analyze(const std::string& ckpt_path, int layer,
                std::vector<int> channels, std::vector<int> ks,
                std::string out_flag) {
  CheckpointData ckpt = load_checkpoint(ckpt_path);
  ExperimentConfig cfg = parse_experiment(ckpt.experiment);
  const VariantConfig* variant = nullptr;
  for (const VariantConfig& v : cfg.variants)
    if (v.name == ckpt.variant) variant = &v;
  if (variant == nullptr)
    throw std::runtime_error(ckpt_path + ": variant \"" + ckpt.variant +
                             "\" not in embedded config");

  SplitData data = make_splits(cfg.dataset, ckpt.seed);
  Network net(sample_shape(data.train),
              instantiate_layers(cfg, *variant, data.train.num_classes),
              ckpt.seed);
  configure_queues(net, *variant);
  network_from_json(net, ckpt.network);
  if (layer < 0 || layer >= static_cast<int>(net.layers().size()))
    throw ConfigError("--layer: out of range (network has " +
                      std::to_string(net.layers().size()) + " layers)");

  // Pre-layer activations over a bounded sample, in inference mode.
  int N = std::min(data.train.x.extent(0), 4096);
  size_t sample = static_cast<size_t>(data.train.x.size()) /
                  static_cast<size_t>(data.train.x.extent(0));
  std::vector<double> rows_data;
  int m_total = 0, C = 0;
  for (int done = 0; done < N; done += 256) {
    int B = std::min(256, N - done);
    std::vector<int> shape = sample_shape(data.train);
    shape.insert(shape.begin(), B);
    Tensor chunk(shape);
    std::copy_n(data.train.x.data() + static_cast<size_t>(done) * sample,
                static_cast<size_t>(B) * sample, chunk.data());
    Tensor acts = net.forward_to(chunk, layer);
    Tensor rows = acts.dim() == 4 ? flatten_batch(acts) : acts;
    if (rows.dim() != 2)
      throw std::runtime_error("analyze: activations are not channel-shaped");
    C = rows.extent(1);
    rows_data.insert(rows_data.end(), rows.data(), rows.data() + rows.size());
    m_total += rows.extent(0);
  }
  Tensor acts = Tensor::from({m_total, C}, std::move(rows_data));

  if (channels.empty()) {
    int count = std::min(C, 8);
    for (int i = 0; i < count; ++i)
      channels.push_back(i * C / count);
  }
  if (ks.empty()) ks = {2, 3};

  std::vector<ChannelAnalysis> analysis =
      analyze_distribution(acts, channels, ks, ckpt.seed);

  fs::path out_dir =
      out_flag.empty()
          ? fs::path(fs::path(ckpt_path).replace_extension().string() +
                     "-analysis")
          : fs::path(out_flag);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw std::runtime_error(out_dir.string() + ": cannot create directory");

  write_analysis_json((out_dir / "analysis.json").string(), analysis);
  std::printf("%-8s %12s", "channel", "gauss-ll");
  for (int k : ks) std::printf("   K=%-2d ll   ", k);
  std::printf("\n");
  for (const ChannelAnalysis& a : analysis) {
    write_analysis_svg(
        (out_dir / ("channel_" + std::to_string(a.channel) + ".svg")).string(),
        a);
    std::printf("%-8d %12.5f", a.channel, a.gauss_ll);
    for (const GmmFitSummary& f : a.fits) std::printf(" %12.5f", f.ll);
    std::printf("\n");
  }
  std::cout << "wrote " << out_dir.string() << "\n";
  return 0;
}

int cmd_plot(const std::vector<std::string>& csvs, int window,
             const std::string& out_file) {
  std::vector<RunRecord> records;
  for (const std::string& path : csvs)
    records.push_back(read_metrics_csv(path));
  PlotOptions popt;
  popt.window = window;
  emit_plots(out_file, records, popt);
  std::cout << "wrote " << out_file << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"mixture-normalization benchmark driver"};
  app.require_subcommand(1);

  std::string config_path, out_flag;
  std::vector<uint64_t> seeds_flag;
  CLI::App* run = app.add_subcommand("run", "train all variants of a config");
  run->add_option("config", config_path, "experiment config (JSON)")
      ->required();
  run->add_option("--seeds", seeds_flag, "override the config's seed list");
  run->add_option("--out", out_flag, "output directory (default runs/<name>)");

  std::string ckpt_path, analyze_out;
  int layer = 0;
  std::vector<int> channels, ks;
  CLI::App* analyze = app.add_subcommand(
      "analyze", "fit mixtures to a checkpoint's pre-layer activations");
  analyze->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  analyze->add_option("--layer", layer, "network layer index")->required();
  analyze->add_option("--channels", channels, "channels to analyze");
  analyze->add_option("--k", ks, "mixture sizes to fit (default 2 3)");
  analyze->add_option("--out", analyze_out, "output directory");

  std::vector<std::string> csvs;
  int window = 10;
  std::string plot_out = "plot.svg";
  CLI::App* plot = app.add_subcommand("plot", "render metrics CSVs as SVG");
  plot->add_option("csv", csvs, "metrics CSV files")->required();
  plot->add_option("--window", window, "trailing window in eval points")
      ->check(CLI::PositiveNumber);
  plot->add_option("--out", plot_out, "output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, seeds_flag, out_flag);
    if (analyze->parsed())
      return cmd_analyze(ckpt_path, layer, channels, ks, analyze_out);
    return cmd_plot(csvs, window, plot_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace mixnorm
