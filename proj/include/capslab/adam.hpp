#pragma once

#include <cstdint>
#include <vector>

#include "capslab/tensor.hpp"

namespace capslab {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction. Parameters without an accumulated gradient are
// treated as having gradient zero (their moments still decay), so a step is
// always well defined and a zero gradient leaves the value untouched.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {});

  void step();
  void zero_grad();
  int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace capslab
