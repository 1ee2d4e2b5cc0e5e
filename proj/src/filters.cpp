#include "capslab/filters.hpp"

#include <algorithm>
#include <array>

namespace capslab {

Tensor median_filter3x3(const Tensor& x) {
  if (x.ndim() < 2) {
    throw ShapeError("median_filter3x3: want at least 2 axes, got " + shape_str(x.shape()));
  }
  const int h = x.shape()[static_cast<size_t>(x.ndim() - 2)];
  const int w = x.shape().back();
  const int64_t planes = x.size() / (static_cast<int64_t>(h) * w);

  std::vector<float> out(static_cast<size_t>(x.size()));
  const float* px = x.data().data();
  for (int64_t pl = 0; pl < planes; ++pl) {
    const float* src = px + pl * h * w;
    float* dst = out.data() + pl * h * w;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        std::array<float, 9> v;
        int k = 0;
        for (int di = -1; di <= 1; ++di) {
          const int ii = std::clamp(i + di, 0, h - 1);
          for (int dj = -1; dj <= 1; ++dj) {
            const int jj = std::clamp(j + dj, 0, w - 1);
            v[static_cast<size_t>(k++)] = src[static_cast<size_t>(ii) * w + jj];
          }
        }
        std::nth_element(v.begin(), v.begin() + 4, v.end());
        dst[static_cast<size_t>(i) * w + j] = v[4];
      }
    }
  }
  return Tensor::from_vector(x.shape(), std::move(out));
}

}  // namespace capslab
