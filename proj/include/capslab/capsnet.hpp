#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capslab/config.hpp"
#include "capslab/rng.hpp"
#include "capslab/tensor.hpp"

namespace capslab {

struct RoutingState {
  Tensor u_hat;                   // [N,P,J,Dc], taped
  std::vector<Tensor> couplings;  // one [N,P,J] snapshot per iteration, detached
  Tensor logits;                  // agreement logits after the last update, detached
  Tensor s;                       // final pre-activation, [N,J,Dc], taped
  Tensor v;                       // class capsules, [N,J,Dc], taped
};

// Routing by agreement: b starts at zero; each iteration takes c = softmax(b)
// over the class axis, s_j = sum_i c_ij u_hat_{j|i}, v = squash(s), and between
// iterations b += u_hat . v. Disabled routing runs exactly one uniform pass.
// The loop is unrolled on the tape, so gradients flow through the coupling
// updates.
RoutingState route(const Tensor& u_hat, int iterations, bool routing_enabled);

struct CapsNetParams {
  Tensor conv1_w, conv1_b;
  Tensor primary_w, primary_b;
  Tensor caps_w;  // [P, J, class_dim, primary_dim]
  Tensor dec1_w, dec1_b;
  Tensor dec2_w, dec2_b;
  Tensor dec3_w, dec3_b;

  static CapsNetParams init(const NetworkConfig& cfg, Rng& rng);

  // Fixed name/tensor order shared by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> all() const;
  void set_requires_grad(bool on);
  int64_t count() const;
  void validate_shapes(const NetworkConfig& cfg) const;
};

struct CapsNetOutput {
  Tensor v;      // [N, num_classes, class_dim]
  Tensor probs;  // [N, num_classes], capsule lengths
  RoutingState routing;
};

// x must be [N,1,H,W] with pixels in [0,1].
CapsNetOutput capsnet_forward(const Tensor& x, const CapsNetParams& p, const NetworkConfig& cfg);

// Zeroes every class-capsule row except rows[n], then decodes through three
// fully connected layers into a sigmoid image [N,1,H,W].
Tensor reconstruct(const Tensor& v, const std::vector<int>& rows, const CapsNetParams& p,
                   const NetworkConfig& cfg);

struct CapsNetLoss {
  Tensor total;
  Tensor margin;
  Tensor recon;  // undefined when reconstruction is off
};

// Margin loss on capsule lengths plus the weighted reconstruction term. The
// reconstruction term is the per-image sum of squared pixel errors averaged
// over the batch (so the weak/strong weights act at their intended scale).
// mask_with_labels selects the decoder row by true label (training) or by the
// longest capsule (evaluation).
CapsNetLoss capsnet_loss(const Tensor& x, const CapsNetOutput& out, const std::vector<int>& labels,
                         const CapsNetParams& p, const NetworkConfig& cfg, bool mask_with_labels);

}  // namespace capslab
