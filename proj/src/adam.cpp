#include "capslab/adam.hpp"

#include <cmath>

#include "capslab/errors.hpp"

namespace capslab {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (params_.empty()) throw UsageError("adam: no parameters");
  for (const Tensor& p : params_) {
    if (!p.defined()) throw UsageError("adam: undefined parameter tensor");
    m_.emplace_back(static_cast<size_t>(p.size()), 0.0f);
    v_.emplace_back(static_cast<size_t>(p.size()), 0.0f);
  }
}

void Adam::step() {
  ++t_;
  const float c1 = 1.0f - static_cast<float>(std::pow(cfg_.beta1, static_cast<double>(t_)));
  const float c2 = 1.0f - static_cast<float>(std::pow(cfg_.beta2, static_cast<double>(t_)));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    std::span<float> x = p.data_mut();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const bool has = p.has_grad();
    std::span<const float> g = has ? p.grad() : std::span<const float>{};
    for (size_t k = 0; k < x.size(); ++k) {
      const float gk = has ? g[k] : 0.0f;
      m[k] = cfg_.beta1 * m[k] + (1.0f - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1.0f - cfg_.beta2) * gk * gk;
      const float mhat = m[k] / c1;
      const float vhat = v[k] / c2;
      x[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace capslab
