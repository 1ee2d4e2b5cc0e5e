#include "capslab/baseline_cnn.hpp"

#include <cmath>

#include "capslab/ops.hpp"

namespace capslab {
namespace {

Tensor glorot(Shape shape, int fan_in, int fan_out, Rng& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::vector<float> v(static_cast<size_t>(shape_size(shape)));
  for (float& x : v) x = rng.uniform(-limit, limit);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

Tensor conv_init(int out_ch, int in_ch, int k, Rng& rng) {
  return glorot({out_ch, in_ch, k, k}, in_ch * k * k, out_ch * k * k, rng);
}

void expect_shape(const Tensor& t, const Shape& want, const char* name) {
  if (!t.defined() || t.shape() != want) {
    throw ShapeError(std::string("cnn params: ") + name + " has shape " +
                     (t.defined() ? shape_str(t.shape()) : "<missing>") + ", config wants " +
                     shape_str(want));
  }
}

}  // namespace

CnnParams CnnParams::init(const CnnConfig& cfg, Rng& rng) {
  cfg.validate();
  CnnParams p;
  p.conv1_w = conv_init(cfg.c1, 1, cfg.kernel, rng);
  p.conv1_b = Tensor::zeros({cfg.c1}, true);
  p.conv2_w = conv_init(cfg.c2, cfg.c1, cfg.kernel, rng);
  p.conv2_b = Tensor::zeros({cfg.c2}, true);
  p.conv3_w = conv_init(cfg.c3, cfg.c2, cfg.kernel, rng);
  p.conv3_b = Tensor::zeros({cfg.c3}, true);
  p.fc1_w = glorot({cfg.fc1, cfg.flat_dim()}, cfg.flat_dim(), cfg.fc1, rng);
  p.fc1_b = Tensor::zeros({cfg.fc1}, true);
  p.fc2_w = glorot({cfg.fc2, cfg.fc1}, cfg.fc1, cfg.fc2, rng);
  p.fc2_b = Tensor::zeros({cfg.fc2}, true);
  p.out_w = glorot({cfg.num_classes, cfg.fc2}, cfg.fc2, cfg.num_classes, rng);
  p.out_b = Tensor::zeros({cfg.num_classes}, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> CnnParams::named() const {
  return {
      {"conv1.weight", conv1_w}, {"conv1.bias", conv1_b}, {"conv2.weight", conv2_w},
      {"conv2.bias", conv2_b},   {"conv3.weight", conv3_w}, {"conv3.bias", conv3_b},
      {"fc1.weight", fc1_w},     {"fc1.bias", fc1_b},     {"fc2.weight", fc2_w},
      {"fc2.bias", fc2_b},       {"out.weight", out_w},   {"out.bias", out_b},
  };
}

std::vector<Tensor> CnnParams::all() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

void CnnParams::set_requires_grad(bool on) {
  for (Tensor t : all()) t.set_requires_grad(on);
}

int64_t CnnParams::count() const {
  int64_t n = 0;
  for (const Tensor& t : all()) n += t.size();
  return n;
}

void CnnParams::validate_shapes(const CnnConfig& cfg) const {
  expect_shape(conv1_w, {cfg.c1, 1, cfg.kernel, cfg.kernel}, "conv1.weight");
  expect_shape(conv1_b, {cfg.c1}, "conv1.bias");
  expect_shape(conv2_w, {cfg.c2, cfg.c1, cfg.kernel, cfg.kernel}, "conv2.weight");
  expect_shape(conv2_b, {cfg.c2}, "conv2.bias");
  expect_shape(conv3_w, {cfg.c3, cfg.c2, cfg.kernel, cfg.kernel}, "conv3.weight");
  expect_shape(conv3_b, {cfg.c3}, "conv3.bias");
  expect_shape(fc1_w, {cfg.fc1, cfg.flat_dim()}, "fc1.weight");
  expect_shape(fc1_b, {cfg.fc1}, "fc1.bias");
  expect_shape(fc2_w, {cfg.fc2, cfg.fc1}, "fc2.weight");
  expect_shape(fc2_b, {cfg.fc2}, "fc2.bias");
  expect_shape(out_w, {cfg.num_classes, cfg.fc2}, "out.weight");
  expect_shape(out_b, {cfg.num_classes}, "out.bias");
}

Tensor cnn_forward(const Tensor& x, const CnnParams& p, const CnnConfig& cfg, Rng* dropout_rng) {
  p.validate_shapes(cfg);
  if (x.ndim() != 4 || x.dim(1) != 1 || x.dim(2) != cfg.input_h || x.dim(3) != cfg.input_w) {
    throw ShapeError("cnn_forward: input must be [N,1," + std::to_string(cfg.input_h) + "," +
                     std::to_string(cfg.input_w) + "], got " + shape_str(x.shape()));
  }
  Tensor h = ops::relu(ops::conv2d(x, p.conv1_w, p.conv1_b, cfg.s1));
  h = ops::relu(ops::conv2d(h, p.conv2_w, p.conv2_b, cfg.s2));
  h = ops::relu(ops::conv2d(h, p.conv3_w, p.conv3_b, cfg.s3));
  h = ops::reshape(h, {x.dim(0), cfg.flat_dim()});
  h = ops::relu(ops::linear(h, p.fc1_w, p.fc1_b));
  if (dropout_rng) h = ops::dropout(h, cfg.dropout, *dropout_rng, true);
  h = ops::relu(ops::linear(h, p.fc2_w, p.fc2_b));
  if (dropout_rng) h = ops::dropout(h, cfg.dropout, *dropout_rng, true);
  return ops::linear(h, p.out_w, p.out_b);
}

}  // namespace capslab
