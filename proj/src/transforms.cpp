#include "capslab/transforms.hpp"

#include <algorithm>
#include <cmath>

#include "capslab/errors.hpp"

namespace capslab {
namespace {

constexpr double kPi = 3.14159265358979323846;

void expect_image(const Tensor& image, const char* who) {
  if (image.ndim() != 3 || image.dim(0) != 1) {
    throw ShapeError(std::string(who) + ": image must be [1,H,W], got " + shape_str(image.shape()));
  }
}

// Trig at grid angles leaves ~1e-16 dust on coordinates that should be whole;
// snapping keeps axis-aligned rotations and integer shifts exact.
double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

float sample_bilinear(std::span<const float> img, int h, int w, double sy, double sx) {
  sy = snap(sy);
  sx = snap(sx);
  if (sy <= -1.0 || sx <= -1.0 || sy >= static_cast<double>(h) || sx >= static_cast<double>(w)) {
    return 0.0f;
  }
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const double fy = sy - y0, fx = sx - x0;
  auto at = [&](int y, int x) -> double {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return img[static_cast<size_t>(y) * w + x];
  };
  const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1);
  const double bottom = (1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1);
  return static_cast<float>((1.0 - fy) * top + fy * bottom);
}

Tensor resample(const Tensor& image, double m00, double m01, double m10, double m11) {
  const int h = image.dim(1), w = image.dim(2);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  std::span<const float> src = image.data();
  std::vector<float> out(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const double dy = y - cy;
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx;
      const double sx = cx + m00 * dx + m01 * dy;
      const double sy = cy + m10 * dx + m11 * dy;
      out[static_cast<size_t>(y) * w + x] = sample_bilinear(src, h, w, sy, sx);
    }
  }
  return Tensor::from_vector({1, h, w}, std::move(out));
}

Tensor shift_rows(const Tensor& image, int k) {
  const int h = image.dim(1), w = image.dim(2);
  std::span<const float> src = image.data();
  std::vector<float> out(static_cast<size_t>(h) * w, 0.0f);
  for (int y = 0; y < h; ++y) {
    const int sy = y - k;
    if (sy < 0 || sy >= h) continue;
    std::copy(src.begin() + static_cast<size_t>(sy) * w, src.begin() + (static_cast<size_t>(sy) + 1) * w,
              out.begin() + static_cast<size_t>(y) * w);
  }
  return Tensor::from_vector({1, h, w}, std::move(out));
}

Tensor morphology_rounds(const Tensor& image, int k) {
  const int h = image.dim(1), w = image.dim(2);
  const bool dilate = k > 0;
  std::vector<float> cur(image.data().begin(), image.data().end());
  std::vector<float> next(cur.size());
  for (int round = 0; round < std::abs(k); ++round) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        float v = cur[static_cast<size_t>(y) * w + x];
        for (int ny = std::max(0, y - 1); ny <= std::min(h - 1, y + 1); ++ny) {
          for (int nx = std::max(0, x - 1); nx <= std::min(w - 1, x + 1); ++nx) {
            const float u = cur[static_cast<size_t>(ny) * w + nx];
            v = dilate ? std::max(v, u) : std::min(v, u);
          }
        }
        next[static_cast<size_t>(y) * w + x] = v;
      }
    }
    cur.swap(next);
  }
  return Tensor::from_vector({1, h, w}, std::move(cur));
}

std::vector<float> step_grid(int lo, int hi, int step) {
  std::vector<float> g;
  for (int v = lo; v <= hi; v += step) g.push_back(static_cast<float>(v));
  return g;
}

}  // namespace

std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Rotation:
      return "rotation";
    case TransformKind::Scale:
      return "scale";
    case TransformKind::ShiftY:
      return "shift_y";
    case TransformKind::Morphology:
      return "morphology";
  }
  throw UsageError("unknown transform kind value");
}

TransformKind transform_kind_from_string(const std::string& s) {
  if (s == "rotation") return TransformKind::Rotation;
  if (s == "scale") return TransformKind::Scale;
  if (s == "shift_y") return TransformKind::ShiftY;
  if (s == "morphology") return TransformKind::Morphology;
  throw UsageError("transform must be rotation|scale|shift_y|morphology, got '" + s + "'");
}

TransformSpec TransformSpec::rotation() { return {TransformKind::Rotation, step_grid(-45, 45, 5)}; }
TransformSpec TransformSpec::scale() { return {TransformKind::Scale, step_grid(-40, 40, 10)}; }
TransformSpec TransformSpec::shift_y() { return {TransformKind::ShiftY, step_grid(-4, 4, 1)}; }
TransformSpec TransformSpec::morphology() {
  return {TransformKind::Morphology, step_grid(-4, 4, 1)};
}

TransformSpec TransformSpec::standard(TransformKind k) {
  switch (k) {
    case TransformKind::Rotation:
      return rotation();
    case TransformKind::Scale:
      return scale();
    case TransformKind::ShiftY:
      return shift_y();
    case TransformKind::Morphology:
      return morphology();
  }
  throw UsageError("unknown transform kind value");
}

void TransformSpec::validate() const {
  if (grid.empty()) throw UsageError("transform grid is empty");
  bool has_zero = false;
  for (size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] == 0.0f) has_zero = true;
    if (i > 0 && grid[i] <= grid[i - 1]) {
      throw UsageError("transform grid must increase strictly: entry " + std::to_string(i) +
                       " is " + std::to_string(grid[i]) + " after " + std::to_string(grid[i - 1]));
    }
    if ((kind == TransformKind::ShiftY || kind == TransformKind::Morphology) &&
        grid[i] != std::round(grid[i])) {
      throw UsageError(to_string(kind) + " intensities must be whole, got " +
                       std::to_string(grid[i]));
    }
    if (kind == TransformKind::Scale && grid[i] <= -100.0f) {
      throw UsageError("scale percent must stay above -100, got " + std::to_string(grid[i]));
    }
  }
  if (!has_zero) throw UsageError("transform grid must contain intensity 0 (the identity)");
}

int TransformSpec::center_index() const {
  for (size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] == 0.0f) return static_cast<int>(i);
  }
  throw UsageError("transform grid must contain intensity 0 (the identity)");
}

Tensor apply_transform(const Tensor& image, const TransformSpec& spec, float intensity) {
  expect_image(image, "apply_transform");
  spec.validate();
  if (std::find(spec.grid.begin(), spec.grid.end(), intensity) == spec.grid.end()) {
    throw UsageError("intensity " + std::to_string(intensity) + " is not in the " +
                     to_string(spec.kind) + " grid");
  }
  if (intensity == 0.0f) return image.clone();
  switch (spec.kind) {
    case TransformKind::Rotation: {
      const double rad = static_cast<double>(intensity) * kPi / 180.0;
      const double c = std::cos(rad), s = std::sin(rad);
      return resample(image, c, -s, s, c);
    }
    case TransformKind::Scale: {
      const double inv = 1.0 / (1.0 + static_cast<double>(intensity) / 100.0);
      return resample(image, inv, 0.0, 0.0, inv);
    }
    case TransformKind::ShiftY:
      return shift_rows(image, static_cast<int>(intensity));
    case TransformKind::Morphology:
      return morphology_rounds(image, static_cast<int>(intensity));
  }
  throw UsageError("unknown transform kind value");
}

std::vector<Tensor> make_transform_series(const Tensor& image, const TransformSpec& spec) {
  expect_image(image, "make_transform_series");
  spec.validate();
  std::vector<Tensor> series;
  series.reserve(spec.grid.size());
  for (float intensity : spec.grid) {
    series.push_back(intensity == 0.0f ? image : apply_transform(image, spec, intensity));
  }
  return series;
}

}  // namespace capslab
