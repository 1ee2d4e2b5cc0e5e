#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capslab/config.hpp"
#include "capslab/rng.hpp"
#include "capslab/tensor.hpp"

namespace capslab {

struct CnnParams {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor conv3_w, conv3_b;
  Tensor fc1_w, fc1_b;
  Tensor fc2_w, fc2_b;
  Tensor out_w, out_b;

  static CnnParams init(const CnnConfig& cfg, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> all() const;
  void set_requires_grad(bool on);
  int64_t count() const;
  void validate_shapes(const CnnConfig& cfg) const;
};

// Three relu convolutions, then two relu fully connected layers (dropout after
// each when dropout_rng is given) and a linear 10-way output. Returns logits.
Tensor cnn_forward(const Tensor& x, const CnnParams& p, const CnnConfig& cfg,
                   Rng* dropout_rng = nullptr);

}  // namespace capslab
