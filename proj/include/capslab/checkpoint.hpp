#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capslab/baseline_cnn.hpp"
#include "capslab/capsnet.hpp"
#include "capslab/config.hpp"

namespace capslab {

// On-disk model container: the magic "CAPSLAB1", a length-prefixed JSON block
// (model kind, config, training metadata, tensor manifest), the raw float32
// little-endian tensor payloads in manifest order, and a trailing crc32 over
// everything before it.
struct Checkpoint {
  std::string model;  // "capsnet" | "cnn"
  NetworkConfig caps_config;
  CnnConfig cnn_config;
  int epochs = 0;
  uint64_t seed = 0;
  std::map<std::string, double> metrics;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const NetworkConfig& cfg, const CapsNetParams& params, int epochs,
                           uint64_t seed, std::map<std::string, double> metrics = {});
Checkpoint make_checkpoint(const CnnConfig& cfg, const CnnParams& params, int epochs,
                           uint64_t seed, std::map<std::string, double> metrics = {});

// Rebuild typed parameters; validates tensor shapes against the stored config.
CapsNetParams capsnet_from_checkpoint(const Checkpoint& ck);
CnnParams cnn_from_checkpoint(const Checkpoint& ck);

}  // namespace capslab
