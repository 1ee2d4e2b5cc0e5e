#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "capslab/baseline_cnn.hpp"
#include "capslab/capsnet.hpp"
#include "capslab/config.hpp"
#include "capslab/dataset.hpp"
#include "capslab/pca.hpp"
#include "capslab/transforms.hpp"

namespace capslab {

// Knobs for the pixel-space optimizers. Every step clips pixels to
// [clip_lo, clip_hi]; every filter_period-th step additionally applies a 3x3
// median filter. Trial t draws its starting noise from stream (seed, t), so
// runs are deterministic and trials are order-independent.
struct AmConfig {
  int steps = 1000;
  float step_size = 0.1f;
  int filter_period = 100;
  float clip_lo = 0.0f;
  float clip_hi = 1.0f;
  float init_lo = 0.4f;  // starting-noise interval; matching tasks on
  float init_hi = 0.6f;  // dark-background data want something like [0, 0.2]
  uint64_t seed = 0;
  int trials = 100;

  void validate() const;
};

struct AmTrial {
  Tensor image;            // [1,H,W], pixels within the clip range
  double activation = 0;   // objective at the final image
  double initial = 0;      // objective at the starting noise
  int trial = 0;           // original trial index (sort tie-break)
};

// Differentiable scalar objective of a [1,1,H,W] image batch.
using AmObjective = std::function<Tensor(const Tensor&)>;

// Gradient ascent on pixels from uniform noise in [init_lo, init_hi], one run
// per trial; returns trials sorted by final activation descending (earlier
// trial wins ties). steps == 0 returns the starting images unchanged.
std::vector<AmTrial> maximize_objective(const AmObjective& objective, int h, int w,
                                        const AmConfig& cfg);

// Objective = length of class capsule j / logit j.
std::vector<AmTrial> activation_maximize(const CapsNetParams& p, const NetworkConfig& cfg,
                                         int class_j, const AmConfig& am);
std::vector<AmTrial> activation_maximize_cnn(const CnnParams& p, const CnnConfig& cfg,
                                             int class_j, const AmConfig& am);

struct MatchResult {
  Tensor image;                  // [1,H,W]
  double initial_loss = 0;
  double final_loss = 0;
  double reduction_ratio = 0;    // (initial - final) / initial, clamped to [0,1]
  int predicted_class = 0;       // argmax capsule length at the final image
};

// Gradient descent on || v_j(x) - target ||^2 with the same projections as
// maximization. target must have class_dim entries. init (a [1,H,W] image)
// replaces the noise start when given.
MatchResult activation_match(const CapsNetParams& p, const NetworkConfig& cfg, int class_j,
                             std::span<const float> target, const AmConfig& am,
                             const Tensor* init = nullptr);

// Class-j capsule vectors of every image, one row per image.
std::vector<std::vector<double>> capsule_rows(const CapsNetParams& p, const NetworkConfig& cfg,
                                              const Dataset& images, int class_j);

// PCA over the class-j capsule vectors of >= 2 images.
PcaModel fit_pca(const CapsNetParams& p, const NetworkConfig& cfg, const Dataset& images,
                 int class_j);

// Variance spread across principal components. For a single class `variance`
// holds raw eigenvalues; aggregated across classes it holds the average of
// each class's normalized spectrum. `cumulative` is the running fraction of
// total variance and reaches 1 unless every class was degenerate.
struct CompactionCurve {
  std::vector<double> variance;
  std::vector<double> cumulative;
  std::string scope;  // "class-3" | "all-classes"
};

CompactionCurve energy_compaction_curve(const CapsNetParams& p, const NetworkConfig& cfg,
                                        const Dataset& test, int class_j);
CompactionCurve energy_compaction_curve_all(const CapsNetParams& p, const NetworkConfig& cfg,
                                            const Dataset& test);

// A transformation series traced through the capsule space: PCA fitted on the
// series' class capsules, each intensity projected onto the first two
// components. A singleton series gets a degenerate identity model (single
// point at the origin).
struct TransformCurve {
  TransformSpec spec;
  int true_label = 0;
  int predicted_label = 0;         // of the untransformed image
  bool misclassified = false;      // recorded warning; analysis still runs
  PcaModel pca;
  std::vector<std::vector<double>> capsules;  // per intensity, class row
  std::vector<std::array<double, 2>> points;  // per intensity, (PC1, PC2)
};

TransformCurve forward_analysis(const CapsNetParams& p, const NetworkConfig& cfg,
                                const Tensor& image, int true_label, const TransformSpec& spec);

// Images recovered from capsule vectors displaced along one principal
// component. component is 1-based. Matching starts at the original image, so
// the zero offset is a fixed point up to filtering and each nonzero offset
// morphs the digit along the component.
struct PreImageResult {
  int component = 0;
  std::vector<double> offsets;
  std::vector<std::vector<float>> targets;  // displaced vectors, native space
  std::vector<Tensor> images;               // [1,H,W] per offset
  std::vector<double> initial_loss;
  std::vector<double> final_loss;
  std::vector<double> reduction_ratio;
  std::vector<double> manifold_distance;    // 2D distance to the forward curve
};

PreImageResult preimage_analysis(const CapsNetParams& p, const NetworkConfig& cfg,
                                 const Tensor& image, const TransformCurve& curve, int component,
                                 const std::vector<double>& offsets, const AmConfig& am);

}  // namespace capslab
