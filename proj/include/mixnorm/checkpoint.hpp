#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "mixnorm/net.hpp"

namespace mixnorm {

// Layer parameters, BN running statistics, and mixture queues as JSON.
// Doubles are stored as hex-float strings ("%a"), so a save/load round trip
// is bit-exact.
nlohmann::json network_to_json(const Network& net);
// Restores into a network built from the same specs; throws on any mismatch.
void network_from_json(Network& net, const nlohmann::json& j);

void save_checkpoint(const std::string& path, const nlohmann::json& experiment,
                     const std::string& variant, uint64_t seed, long long step,
                     int epoch, const Network& net);

struct CheckpointData {
  nlohmann::json experiment;
  std::string variant;
  uint64_t seed = 0;
  long long step = 0;
  int epoch = 0;
  nlohmann::json network;
};

CheckpointData load_checkpoint(const std::string& path);

}  // namespace mixnorm
