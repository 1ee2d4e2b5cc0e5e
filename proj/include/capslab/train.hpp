#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capslab/baseline_cnn.hpp"
#include "capslab/capsnet.hpp"
#include "capslab/config.hpp"
#include "capslab/dataset.hpp"

namespace capslab {

struct TrainOptions {
  int epochs = 5;
  int batch_size = 32;
  uint64_t seed = 0;
  float lr = 1e-3f;
  std::string checkpoint_dir;  // per-epoch checkpoints written when non-empty
  bool log = false;            // per-epoch stderr progress lines
};

struct EpochStats {
  int epoch = 0;        // 1-based
  double margin = 0.0;  // cross-entropy for the cnn
  double recon = 0.0;   // unweighted reconstruction term; 0 when off
  double total = 0.0;
  double test_error = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::string config_id;
  uint64_t seed = 0;
  std::vector<EpochStats> epochs;
  double final_test_error = 1.0;
  double wall_seconds = 0.0;
  std::vector<std::string> checkpoint_files;
};

struct Evaluation {
  double error_rate = 1.0;
  int classes = 0;
  std::vector<int> confusion;  // classes x classes, row = true label, col = prediction
};

struct CapsTrainResult {
  CapsNetParams params;
  TrainReport report;
};

struct CnnTrainResult {
  CnnParams params;
  TrainReport report;
};

// Seeded end to end: parameter init, batch order, and (cnn) dropout masks all
// derive from opt.seed, so two runs with equal inputs match bit for bit.
// Aborts with a numerical error naming the step if the loss stops being
// finite.
CapsTrainResult train_capsnet(const NetworkConfig& cfg, const Dataset& train_set,
                              const Dataset& test_set, const TrainOptions& opt);
CnnTrainResult train_cnn(const CnnConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                         const TrainOptions& opt);

Evaluation evaluate_capsnet(const CapsNetParams& p, const NetworkConfig& cfg, const Dataset& data);
Evaluation evaluate_cnn(const CnnParams& p, const CnnConfig& cfg, const Dataset& data);

// Deterministic renderings of the report; no wall-clock fields (timing lives
// in the run manifest so these stay bit-identical across reruns).
std::string report_to_json(const TrainReport& r);
std::string report_to_csv(const TrainReport& r);

}  // namespace capslab
