#pragma once

#include <string>
#include <vector>

#include "capslab/tensor.hpp"

namespace capslab {

enum class TransformKind { Rotation, Scale, ShiftY, Morphology };

std::string to_string(TransformKind k);
TransformKind transform_kind_from_string(const std::string& s);

// A family of image deformations swept over a signed intensity grid.
// Intensity units: rotation degrees (positive turns the content
// counterclockwise), scale percent change (+40 enlarges by 40%), shift_y whole
// pixels (positive moves the content down), morphology rounds of 3x3 dilation
// (positive) or erosion (negative).
struct TransformSpec {
  TransformKind kind = TransformKind::Rotation;
  std::vector<float> grid;  // strictly increasing, symmetric about 0, contains 0

  static TransformSpec rotation();    // -45..45 degrees, step 5
  static TransformSpec scale();       // -40..40 percent, step 10
  static TransformSpec shift_y();     // -4..4 pixels
  static TransformSpec morphology();  // -4..4 rounds
  static TransformSpec standard(TransformKind k);

  void validate() const;
  int center_index() const;  // position of intensity 0
};

// Applies one member of the family to an image [1,H,W] with pixels in [0,1].
// Rotation and scale resample bilinearly about the image center (H-1)/2,
// (W-1)/2 and fill uncovered regions with 0. The intensity must be a grid
// member.
Tensor apply_transform(const Tensor& image, const TransformSpec& spec, float intensity);

// One image per grid intensity, ascending; the intensity-0 slot holds the
// original tensor itself.
std::vector<Tensor> make_transform_series(const Tensor& image, const TransformSpec& spec);

}  // namespace capslab
