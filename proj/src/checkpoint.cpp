#include "mixnorm/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace mixnorm {

namespace {

constexpr char kFormat[] = "mixnorm-checkpoint v1";

std::string hex_of(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double hex_to(const nlohmann::json& j, const std::string& where) {
  if (!j.is_string())
    throw std::runtime_error(where + ": expected a hex-float string");
  const std::string& s = j.get_ref<const std::string&>();
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw std::runtime_error(where + ": cannot parse \"" + s + "\"");
  return v;
}

nlohmann::json arr_of(const double* p, size_t n) {
  nlohmann::json a = nlohmann::json::array();
  for (size_t i = 0; i < n; ++i) a.push_back(hex_of(p[i]));
  return a;
}

void arr_to(const nlohmann::json& a, double* p, size_t n,
            const std::string& where) {
  if (!a.is_array() || a.size() != n)
    throw std::runtime_error(where + ": expected an array of " +
                             std::to_string(n) + " values");
  for (size_t i = 0; i < n; ++i)
    p[i] = hex_to(a[i], where + "[" + std::to_string(i) + "]");
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::bn: return "bn";
    case LayerKind::mn: return "mn";
    case LayerKind::mn_relu: return "mn_relu";
  }
  return "?";
}

}  // namespace

nlohmann::json network_to_json(const Network& net) {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const Layer& l : net.layers()) {
    nlohmann::json jl;
    jl["kind"] = kind_name(l.spec.kind);
    switch (l.spec.kind) {
      case LayerKind::conv:
      case LayerKind::dense:
        jl["weight"] = arr_of(l.weight.data(), static_cast<size_t>(l.weight.size()));
        jl["bias"] = arr_of(l.bias.data(), l.bias.size());
        break;
      case LayerKind::bn:
        jl["gamma"] = arr_of(l.affine.gamma.data(), l.affine.gamma.size());
        jl["beta"] = arr_of(l.affine.beta.data(), l.affine.beta.size());
        jl["running_mean"] =
            arr_of(l.bn.running_mean.data(), l.bn.running_mean.size());
        jl["running_var"] =
            arr_of(l.bn.running_var.data(), l.bn.running_var.size());
        jl["momentum"] = hex_of(l.bn.momentum);
        jl["eps"] = hex_of(l.bn.eps);
        jl["batches_seen"] = l.bn.batches_seen;
        break;
      case LayerKind::mn:
      case LayerKind::mn_relu: {
        jl["gamma"] = arr_of(l.affine.gamma.data(), l.affine.gamma.size());
        jl["beta"] = arr_of(l.affine.beta.data(), l.affine.beta.size());
        nlohmann::json jq;
        jq["capacity"] = l.queue.capacity;
        jq["zeta"] = hex_of(l.queue.zeta);
        jq["entries"] = nlohmann::json::array();
        for (const GmmParams& p : l.queue.entries) {
          nlohmann::json je;
          je["K"] = p.K;
          je["D"] = p.D;
          je["lambda"] = arr_of(p.lambda.data(), p.lambda.size());
          je["mu"] = arr_of(p.mu.data(), p.mu.size());
          je["sigma2"] = arr_of(p.sigma2.data(), p.sigma2.size());
          jq["entries"].push_back(std::move(je));
        }
        jl["queue"] = std::move(jq);
        break;
      }
      default:
        break;
    }
    j["layers"].push_back(std::move(jl));
  }
  return j;
}

void network_from_json(Network& net, const nlohmann::json& j) {
  if (!j.contains("layers") || !j["layers"].is_array())
    throw std::runtime_error("network state: missing layers array");
  const nlohmann::json& jls = j["layers"];
  std::vector<Layer>& layers = net.layers();
  if (jls.size() != layers.size())
    throw std::runtime_error("network state: layer count mismatch (" +
                             std::to_string(jls.size()) + " vs " +
                             std::to_string(layers.size()) + ")");
  for (size_t li = 0; li < layers.size(); ++li) {
    Layer& l = layers[li];
    const nlohmann::json& jl = jls[li];
    std::string where = "layers[" + std::to_string(li) + "]";
    if (!jl.contains("kind") || jl["kind"] != kind_name(l.spec.kind))
      throw std::runtime_error(where + ": kind mismatch");
    switch (l.spec.kind) {
      case LayerKind::conv:
      case LayerKind::dense:
        arr_to(jl.at("weight"), l.weight.data(),
               static_cast<size_t>(l.weight.size()), where + ".weight");
        arr_to(jl.at("bias"), l.bias.data(), l.bias.size(), where + ".bias");
        break;
      case LayerKind::bn:
        arr_to(jl.at("gamma"), l.affine.gamma.data(), l.affine.gamma.size(),
               where + ".gamma");
        arr_to(jl.at("beta"), l.affine.beta.data(), l.affine.beta.size(),
               where + ".beta");
        arr_to(jl.at("running_mean"), l.bn.running_mean.data(),
               l.bn.running_mean.size(), where + ".running_mean");
        arr_to(jl.at("running_var"), l.bn.running_var.data(),
               l.bn.running_var.size(), where + ".running_var");
        l.bn.momentum = hex_to(jl.at("momentum"), where + ".momentum");
        l.bn.eps = hex_to(jl.at("eps"), where + ".eps");
        l.bn.batches_seen = jl.at("batches_seen").get<long long>();
        break;
      case LayerKind::mn:
      case LayerKind::mn_relu: {
        arr_to(jl.at("gamma"), l.affine.gamma.data(), l.affine.gamma.size(),
               where + ".gamma");
        arr_to(jl.at("beta"), l.affine.beta.data(), l.affine.beta.size(),
               where + ".beta");
        const nlohmann::json& jq = jl.at("queue");
        l.queue.capacity = jq.at("capacity").get<int>();
        l.queue.zeta = hex_to(jq.at("zeta"), where + ".queue.zeta");
        l.queue.entries.clear();
        const nlohmann::json& jes = jq.at("entries");
        if (!jes.is_array())
          throw std::runtime_error(where + ".queue.entries: expected array");
        for (size_t ei = 0; ei < jes.size(); ++ei) {
          const nlohmann::json& je = jes[ei];
          std::string ew = where + ".queue.entries[" + std::to_string(ei) + "]";
          GmmParams p;
          p.K = je.at("K").get<int>();
          p.D = je.at("D").get<int>();
          if (p.K < 1 || p.D < 1)
            throw std::runtime_error(ew + ": bad extents");
          size_t kd = static_cast<size_t>(p.K) * static_cast<size_t>(p.D);
          p.lambda.resize(static_cast<size_t>(p.K));
          p.mu.resize(kd);
          p.sigma2.resize(kd);
          arr_to(je.at("lambda"), p.lambda.data(), p.lambda.size(),
                 ew + ".lambda");
          arr_to(je.at("mu"), p.mu.data(), p.mu.size(), ew + ".mu");
          arr_to(je.at("sigma2"), p.sigma2.data(), p.sigma2.size(),
                 ew + ".sigma2");
          l.queue.entries.push_back(std::move(p));
        }
        break;
      }
      default:
        break;
    }
  }
}

void save_checkpoint(const std::string& path, const nlohmann::json& experiment,
                     const std::string& variant, uint64_t seed, long long step,
                     int epoch, const Network& net) {
  nlohmann::json doc;
  doc["format"] = kFormat;
  doc["experiment"] = experiment;
  doc["variant"] = variant;
  doc["seed"] = seed;
  doc["step"] = step;
  doc["epoch"] = epoch;
  doc["network"] = network_to_json(net);
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << doc.dump(2) << '\n';
  if (!out) throw std::runtime_error(path + ": write failed");
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (!doc.contains("format") || doc["format"] != kFormat)
    throw std::runtime_error(path + ": not a mixnorm checkpoint");
  CheckpointData c;
  try {
    c.experiment = doc.at("experiment");
    c.variant = doc.at("variant").get<std::string>();
    c.seed = doc.at("seed").get<uint64_t>();
    c.step = doc.at("step").get<long long>();
    c.epoch = doc.at("epoch").get<int>();
    c.network = doc.at("network");
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return c;
}

}  // namespace mixnorm
