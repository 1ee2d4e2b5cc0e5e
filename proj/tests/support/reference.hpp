#pragma once

#include <vector>

#include "capslab/capsnet.hpp"

namespace capslab::testsup {

// Flat double copies of the capsule network parameters, in
// CapsNetParams::named() order.
struct RefParams {
  std::vector<std::vector<double>> v;
  static RefParams from(const CapsNetParams& p);
};

// Double-precision re-implementation (plain loops, no tape) of the training
// loss: margin + weight * batch-mean per-image squared reconstruction error,
// decoder row masked by the true label. Serves as the smooth function for
// finite-difference gradient checks against the float32 tape.
double ref_capsnet_total_loss(const NetworkConfig& cfg, const RefParams& rp,
                              const std::vector<float>& images, const std::vector<int>& labels);

}  // namespace capslab::testsup
