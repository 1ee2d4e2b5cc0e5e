#pragma once

#include "capslab/tensor.hpp"

namespace capslab {

// 3x3 median smoothing over the trailing two axes (leading axes are treated
// as batch); border pixels use edge replication. Plain data transform, not
// differentiable: the result is detached from the tape.
Tensor median_filter3x3(const Tensor& x);

}  // namespace capslab
