#include "mixnorm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mixnorm/gmm.hpp"
#include "mixnorm/rng.hpp"

namespace mixnorm {

namespace {

constexpr char kMetricsHeader[] = "# mixnorm-metrics v1";
constexpr char kMetricsColumns[] =
    "run_id,variant,seed,step,epoch,train_loss,test_loss,test_acc,effective_k";
constexpr char kWallHeader[] = "# mixnorm-wall v1";
constexpr char kWallColumns[] = "run_id,step,wall_seconds";

const char* kPalette[] = {"#4878cf", "#d65f5f", "#6acc65", "#b47cc7",
                          "#c4ad66", "#77bedb", "#8c613c", "#82c6e2"};
constexpr size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

std::string fmt_g17(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_g4(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void check_field(const std::string& s, const char* what) {
  if (s.empty() || s.find(',') != std::string::npos ||
      s.find('\n') != std::string::npos)
    throw std::invalid_argument(std::string("metrics: bad ") + what + " \"" +
                                s + "\"");
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw std::runtime_error(where + ": cannot parse number \"" + s + "\"");
  return v;
}

long long parse_ll(const std::string& s, const std::string& where) {
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw std::runtime_error(where + ": cannot parse integer \"" + s + "\"");
  return v;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string metrics_wall_path(const std::string& csv_path) {
  const std::string suffix = ".csv";
  if (csv_path.size() > suffix.size() &&
      csv_path.compare(csv_path.size() - suffix.size(), suffix.size(), suffix) ==
          0)
    return csv_path.substr(0, csv_path.size() - suffix.size()) + ".wall.csv";
  return csv_path + ".wall.csv";
}

void write_metrics_csv(const std::string& path, const RunRecord& rec) {
  if (!rec.wall_seconds.empty() &&
      rec.wall_seconds.size() != rec.rows.size())
    throw std::invalid_argument("metrics: wall_seconds size mismatch");

  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << kMetricsHeader << '\n' << kMetricsColumns << '\n';
  for (const RunRow& r : rec.rows) {
    check_field(r.run_id, "run_id");
    check_field(r.variant, "variant");
    out << r.run_id << ',' << r.variant << ',' << r.seed << ',' << r.step << ','
        << r.epoch << ',' << fmt_g17(r.train_loss) << ','
        << fmt_g17(r.test_loss) << ',' << fmt_g17(r.test_acc) << ',';
    for (size_t i = 0; i < r.effective_k.size(); ++i) {
      if (i) out << ';';
      out << r.effective_k[i];
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
  out.close();

  if (rec.wall_seconds.empty()) return;
  std::string wpath = metrics_wall_path(path);
  std::ofstream wout(wpath);
  if (!wout) throw std::runtime_error(wpath + ": cannot write");
  wout << kWallHeader << '\n' << kWallColumns << '\n';
  for (size_t i = 0; i < rec.rows.size(); ++i)
    wout << rec.rows[i].run_id << ',' << rec.rows[i].step << ','
         << fmt_g17(rec.wall_seconds[i]) << '\n';
}

RunRecord read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw std::runtime_error(path + ": not a mixnorm metrics file");
  if (!std::getline(in, line) || line != kMetricsColumns)
    throw std::runtime_error(path + ": unexpected column header");

  RunRecord rec;
  int lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string where = path + " line " + std::to_string(lineno);
    std::vector<std::string> f = split(line, ',');
    if (f.size() != 9)
      throw std::runtime_error(where + ": expected 9 fields, got " +
                               std::to_string(f.size()));
    RunRow r;
    r.run_id = f[0];
    r.variant = f[1];
    r.seed = static_cast<uint64_t>(parse_ll(f[2], where));
    r.step = parse_ll(f[3], where);
    r.epoch = static_cast<int>(parse_ll(f[4], where));
    r.train_loss = parse_double(f[5], where);
    r.test_loss = parse_double(f[6], where);
    r.test_acc = parse_double(f[7], where);
    if (!f[8].empty())
      for (const std::string& k : split(f[8], ';'))
        r.effective_k.push_back(static_cast<int>(parse_ll(k, where)));
    rec.rows.push_back(std::move(r));
  }

  std::string wpath = metrics_wall_path(path);
  std::ifstream win(wpath);
  if (win) {
    if (!std::getline(win, line) || line != kWallHeader)
      throw std::runtime_error(wpath + ": not a mixnorm wall file");
    if (!std::getline(win, line) || line != kWallColumns)
      throw std::runtime_error(wpath + ": unexpected column header");
    while (std::getline(win, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f = split(line, ',');
      if (f.size() != 3)
        throw std::runtime_error(wpath + ": malformed row");
      rec.wall_seconds.push_back(parse_double(f[2], wpath));
    }
    if (rec.wall_seconds.size() != rec.rows.size())
      throw std::runtime_error(wpath + ": row count does not match " + path);
  }
  return rec;
}

namespace {

struct Series {
  std::vector<double> x;
  std::vector<double> y;
};

// Trailing running mean over the last `window` points.
std::vector<double> windowed(const std::vector<double>& y, int window) {
  std::vector<double> out(y.size());
  double acc = 0.0;
  for (size_t t = 0; t < y.size(); ++t) {
    acc += y[t];
    if (t >= static_cast<size_t>(window)) acc -= y[t - static_cast<size_t>(window)];
    size_t n = std::min(t + 1, static_cast<size_t>(window));
    out[t] = acc / static_cast<double>(n);
  }
  return out;
}

}  // namespace

void emit_plots(const std::string& out_path,
                const std::vector<RunRecord>& runs, const PlotOptions& opts) {
  if (opts.window < 1) throw std::invalid_argument("emit_plots: bad window");

  // Group rows into per-run series of (step, test error), keyed by run_id;
  // remember each run's variant. Variants keep first-appearance order.
  std::map<std::string, Series> by_run;
  std::map<std::string, std::string> run_variant;
  std::vector<std::string> run_order, variant_order;
  for (const RunRecord& rec : runs)
    for (const RunRow& r : rec.rows) {
      if (by_run.find(r.run_id) == by_run.end()) {
        run_order.push_back(r.run_id);
        run_variant[r.run_id] = r.variant;
        if (std::find(variant_order.begin(), variant_order.end(), r.variant) ==
            variant_order.end())
          variant_order.push_back(r.variant);
      }
      by_run[r.run_id].x.push_back(static_cast<double>(r.step));
      by_run[r.run_id].y.push_back(1.0 - r.test_acc);
    }
  if (run_order.empty()) throw std::invalid_argument("emit_plots: no rows");

  // Window each run, then aggregate runs of a variant index-by-index.
  struct Band {
    std::vector<double> x, mean, lo, hi;
  };
  std::vector<Band> bands;
  double xmax = 1.0, ymax = 1e-9;
  for (const std::string& variant : variant_order) {
    std::vector<const Series*> members;
    for (const std::string& id : run_order)
      if (run_variant[id] == variant) members.push_back(&by_run[id]);
    size_t len = members[0]->x.size();
    for (const Series* s : members) len = std::min(len, s->x.size());
    std::vector<std::vector<double>> ys;
    for (const Series* s : members) ys.push_back(windowed(s->y, opts.window));

    Band b;
    for (size_t t = 0; t < len; ++t) {
      double mean = 0.0;
      for (const auto& y : ys) mean += y[t];
      mean /= static_cast<double>(ys.size());
      double var = 0.0;
      for (const auto& y : ys) var += (y[t] - mean) * (y[t] - mean);
      double sd = std::sqrt(var / static_cast<double>(ys.size()));
      b.x.push_back(members[0]->x[t]);
      b.mean.push_back(mean);
      b.lo.push_back(std::max(0.0, mean - sd));
      b.hi.push_back(mean + sd);
      xmax = std::max(xmax, members[0]->x[t]);
      ymax = std::max(ymax, mean + sd);
    }
    bands.push_back(std::move(b));
  }
  ymax *= 1.05;

  int W = opts.width, H = opts.height;
  double L = 70, R = 160, T = 42, B = 55;
  double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + x / xmax * pw; };
  auto py = [&](double y) { return T + ph - y / ymax * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H
      << "\">\n";
  svg << "<rect width=\"" << W << "\" height=\"" << H
      << "\" fill=\"#ffffff\"/>\n";
  if (!opts.title.empty())
    svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"16\">"
        << xml_escape(opts.title) << "</text>\n";

  // Grid and ticks.
  for (int i = 0; i <= 5; ++i) {
    double xv = xmax * i / 5.0, yv = ymax * i / 5.0;
    svg << "<line x1=\"" << px(xv) << "\" y1=\"" << T << "\" x2=\"" << px(xv)
        << "\" y2=\"" << T + ph << "\" stroke=\"#e5e5e5\"/>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << py(yv) << "\" x2=\"" << L + pw
        << "\" y2=\"" << py(yv) << "\" stroke=\"#e5e5e5\"/>\n";
    svg << "<text x=\"" << px(xv) << "\" y=\"" << T + ph + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << fmt_g4(xv) << "</text>\n";
    svg << "<text x=\"" << L - 8 << "\" y=\"" << py(yv) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << fmt_g4(yv) << "</text>\n";
  }
  svg << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw
      << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#444444\"/>\n";
  svg << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 14
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"12\">step</text>\n";
  svg << "<text x=\"18\" y=\"" << T + ph / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"12\" transform=\"rotate(-90 18 " << T + ph / 2
      << ")\">test error (window " << opts.window << ")</text>\n";

  for (size_t vi = 0; vi < bands.size(); ++vi) {
    const Band& b = bands[vi];
    const char* color = kPalette[vi % kPaletteSize];
    if (b.x.size() > 1) {
      svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" "
          << "stroke=\"none\" points=\"";
      for (size_t t = 0; t < b.x.size(); ++t)
        svg << px(b.x[t]) << ',' << py(std::min(b.hi[t], ymax)) << ' ';
      for (size_t t = b.x.size(); t-- > 0;)
        svg << px(b.x[t]) << ',' << py(b.lo[t]) << ' ';
      svg << "\"/>\n";
      svg << "<polyline fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"1.8\" points=\"";
      for (size_t t = 0; t < b.x.size(); ++t)
        svg << px(b.x[t]) << ',' << py(b.mean[t]) << ' ';
      svg << "\"/>\n";
    }
    double ly = T + 16 + 22 * static_cast<double>(vi);
    svg << "<line x1=\"" << L + pw + 14 << "\" y1=\"" << ly << "\" x2=\""
        << L + pw + 40 << "\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2.5\"/>\n";
    svg << "<text x=\"" << L + pw + 46 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\">"
        << xml_escape(variant_order[vi]) << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(out_path);
  if (!out) throw std::runtime_error(out_path + ": cannot write");
  out << svg.str();
  if (!out) throw std::runtime_error(out_path + ": write failed");
}

std::vector<ChannelAnalysis> analyze_distribution(
    const Tensor& acts, const std::vector<int>& channels,
    const std::vector<int>& ks, uint64_t seed, int bins) {
  if (acts.dim() != 2)
    throw std::invalid_argument("analyze_distribution: need (m, C) rows");
  if (bins < 1) throw std::invalid_argument("analyze_distribution: bad bins");
  int m = acts.extent(0), C = acts.extent(1);

  std::vector<ChannelAnalysis> out;
  for (int c : channels) {
    if (c < 0 || c >= C)
      throw std::out_of_range("analyze_distribution: channel out of range");
    Tensor col({m, 1});
    for (int i = 0; i < m; ++i) col(i, 0) = acts(i, c);

    ChannelAnalysis a;
    a.channel = c;
    a.n = m;

    double mean = 0.0, sq = 0.0;
    double lo = col(0, 0), hi = col(0, 0);
    for (int i = 0; i < m; ++i) {
      double v = col(i, 0);
      mean += v;
      sq += v * v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    mean /= m;
    a.gauss_mu = mean;
    a.gauss_sigma2 = std::max(sq / m - mean * mean, kVarianceFloor);
    GmmParams single;
    single.K = 1;
    single.D = 1;
    single.lambda = {1.0};
    single.mu = {a.gauss_mu};
    single.sigma2 = {a.gauss_sigma2};
    a.gauss_ll = log_likelihood(col, single);

    if (hi <= lo) {
      lo -= 0.5;
      hi += 0.5;
    }
    a.hist_edges.resize(static_cast<size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b)
      a.hist_edges[static_cast<size_t>(b)] = lo + (hi - lo) * b / bins;
    a.hist_counts.assign(static_cast<size_t>(bins), 0);
    for (int i = 0; i < m; ++i) {
      int b = static_cast<int>((col(i, 0) - lo) / (hi - lo) * bins);
      b = std::clamp(b, 0, bins - 1);
      ++a.hist_counts[static_cast<size_t>(b)];
    }

    for (int k : ks) {
      if (k < 1 || k > m)
        throw std::invalid_argument("analyze_distribution: bad K for sample count");
      Rng rng = Rng::stream(seed, {20ull, static_cast<uint64_t>(c),
                                   static_cast<uint64_t>(k)});
      FitOptions opts;
      opts.em_iters = 50;
      GmmParams params = fit_gmm(col, k, rng, opts);
      GmmFitSummary fit;
      fit.k = params.K;
      fit.lambda = params.lambda;
      fit.mu = params.mu;
      fit.sigma2 = params.sigma2;
      fit.ll = log_likelihood(col, params);
      a.fits.push_back(std::move(fit));
    }
    out.push_back(std::move(a));
  }
  return out;
}

void write_analysis_json(const std::string& path,
                         const std::vector<ChannelAnalysis>& rows) {
  nlohmann::json doc;
  doc["format"] = "mixnorm-analysis v1";
  doc["channels"] = nlohmann::json::array();
  for (const ChannelAnalysis& a : rows) {
    nlohmann::json jc;
    jc["channel"] = a.channel;
    jc["n"] = a.n;
    jc["gaussian"] = {{"mu", a.gauss_mu},
                      {"sigma2", a.gauss_sigma2},
                      {"ll", a.gauss_ll}};
    jc["fits"] = nlohmann::json::array();
    for (const GmmFitSummary& f : a.fits)
      jc["fits"].push_back({{"k", f.k},
                            {"lambda", f.lambda},
                            {"mu", f.mu},
                            {"sigma2", f.sigma2},
                            {"ll", f.ll}});
    jc["histogram"] = {{"edges", a.hist_edges}, {"counts", a.hist_counts}};
    doc["channels"].push_back(std::move(jc));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << doc.dump(2) << '\n';
}

void write_analysis_svg(const std::string& path, const ChannelAnalysis& a) {
  int W = 640, H = 420;
  double L = 60, R = 24, T = 40, B = 48;
  double pw = W - L - R, ph = H - T - B;
  int bins = static_cast<int>(a.hist_counts.size());
  double lo = a.hist_edges.front(), hi = a.hist_edges.back();
  double bw = (hi - lo) / bins;

  // Histogram as a density so the fitted curves overlay directly.
  double dmax = 1e-12;
  std::vector<double> density(static_cast<size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    density[static_cast<size_t>(b)] =
        static_cast<double>(a.hist_counts[static_cast<size_t>(b)]) /
        (static_cast<double>(a.n) * bw);
    dmax = std::max(dmax, density[static_cast<size_t>(b)]);
  }
  auto gauss_pdf = [](double x, double mu, double s2) {
    return std::exp(-0.5 * (x - mu) * (x - mu) / s2) /
           std::sqrt(2.0 * std::numbers::pi * s2);
  };
  auto mix_pdf = [&](double x, const GmmFitSummary& f) {
    double p = 0.0;
    for (size_t k = 0; k < f.lambda.size(); ++k)
      p += f.lambda[k] * gauss_pdf(x, f.mu[k], f.sigma2[k]);
    return p;
  };
  const int curve_pts = 200;
  for (int i = 0; i <= curve_pts; ++i) {
    double x = lo + (hi - lo) * i / curve_pts;
    dmax = std::max(dmax, gauss_pdf(x, a.gauss_mu, a.gauss_sigma2));
    for (const GmmFitSummary& f : a.fits) dmax = std::max(dmax, mix_pdf(x, f));
  }
  dmax *= 1.08;

  auto px = [&](double x) { return L + (x - lo) / (hi - lo) * pw; };
  auto py = [&](double d) { return T + ph - d / dmax * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H
      << "\">\n<rect width=\"" << W << "\" height=\"" << H
      << "\" fill=\"#ffffff\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"15\">channel " << a.channel
      << " (n=" << a.n << ")</text>\n";
  for (int b = 0; b < bins; ++b) {
    double x0 = px(a.hist_edges[static_cast<size_t>(b)]);
    double x1 = px(a.hist_edges[static_cast<size_t>(b) + 1]);
    double y = py(density[static_cast<size_t>(b)]);
    svg << "<rect x=\"" << x0 << "\" y=\"" << y << "\" width=\"" << x1 - x0
        << "\" height=\"" << T + ph - y
        << "\" fill=\"#b9cbe3\" stroke=\"#ffffff\" stroke-width=\"0.5\"/>\n";
  }
  auto curve = [&](const char* color, auto&& f, const char* dash) {
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.8\"";
    if (dash[0]) svg << " stroke-dasharray=\"" << dash << "\"";
    svg << " points=\"";
    for (int i = 0; i <= curve_pts; ++i) {
      double x = lo + (hi - lo) * i / curve_pts;
      svg << px(x) << ',' << py(f(x)) << ' ';
    }
    svg << "\"/>\n";
  };
  curve("#777777",
        [&](double x) { return gauss_pdf(x, a.gauss_mu, a.gauss_sigma2); },
        "5,4");
  for (size_t fi = 0; fi < a.fits.size(); ++fi)
    curve(kPalette[fi % kPaletteSize],
          [&](double x) { return mix_pdf(x, a.fits[fi]); }, "");
  svg << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw
      << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#444444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double xv = lo + (hi - lo) * i / 4.0;
    svg << "<text x=\"" << px(xv) << "\" y=\"" << T + ph + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << fmt_g4(xv) << "</text>\n";
  }
  double ly = T + 14;
  svg << "<text x=\"" << L + pw - 8 << "\" y=\"" << ly
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
      << "fill=\"#777777\">gaussian ll=" << fmt_g4(a.gauss_ll) << "</text>\n";
  for (size_t fi = 0; fi < a.fits.size(); ++fi) {
    ly += 16;
    svg << "<text x=\"" << L + pw - 8 << "\" y=\"" << ly
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
        << "fill=\"" << kPalette[fi % kPaletteSize] << "\">K=" << a.fits[fi].k
        << " ll=" << fmt_g4(a.fits[fi].ll) << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << svg.str();
}

}  // namespace mixnorm
