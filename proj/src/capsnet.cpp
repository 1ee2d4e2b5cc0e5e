#include "capslab/capsnet.hpp"

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
  if (!t.defined()) {
    throw ShapeError(std::string("capsnet params: ") + name + " is missing");
  }
  if (t.shape() != want) {
    throw ShapeError(std::string("capsnet params: ") + name + " has shape " +
                     shape_str(t.shape()) + ", config wants " + shape_str(want));
  }
}

}  // namespace

RoutingState route(const Tensor& u_hat, int iterations, bool routing_enabled) {
  if (u_hat.ndim() != 4) {
    throw ShapeError("route: predictions must be [N,P,J,D], got " + shape_str(u_hat.shape()));
  }
  if (iterations < 1) {
    throw UsageError("route: iterations must be >= 1, got " + std::to_string(iterations));
  }
  if (!routing_enabled) iterations = 1;
  const int n = u_hat.dim(0), p = u_hat.dim(1), j = u_hat.dim(2);

  RoutingState st;
  st.u_hat = u_hat;
  Tensor b = Tensor::zeros({n, p, j});
  Tensor s, v;
  for (int it = 0; it < iterations; ++it) {
    Tensor c = ops::softmax(b, 2);
    st.couplings.push_back(c.detach());
    s = ops::route_weighted_sum(c, u_hat);
    v = ops::squash(s);
    if (it + 1 < iterations) b = ops::add(b, ops::route_agreement(u_hat, v));
  }
  st.logits = b.detach();
  st.s = s;
  st.v = v;
  return st;
}

CapsNetParams CapsNetParams::init(const NetworkConfig& cfg, Rng& rng) {
  cfg.validate();
  CapsNetParams p;
  p.conv1_w = conv_init(cfg.conv1_channels, 1, cfg.conv1_kernel, rng);
  p.conv1_b = Tensor::zeros({cfg.conv1_channels}, true);
  const int primary_ch = cfg.primary_types * cfg.primary_dim;
  p.primary_w = conv_init(primary_ch, cfg.conv1_channels, cfg.primary_kernel, rng);
  p.primary_b = Tensor::zeros({primary_ch}, true);
  p.caps_w = glorot({cfg.primary_count(), cfg.num_classes, cfg.class_dim, cfg.primary_dim},
                    cfg.primary_dim, cfg.class_dim, rng);
  const int caps_flat = cfg.num_classes * cfg.class_dim;
  p.dec1_w = glorot({cfg.decoder_hidden1, caps_flat}, caps_flat, cfg.decoder_hidden1, rng);
  p.dec1_b = Tensor::zeros({cfg.decoder_hidden1}, true);
  p.dec2_w = glorot({cfg.decoder_hidden2, cfg.decoder_hidden1}, cfg.decoder_hidden1,
                    cfg.decoder_hidden2, rng);
  p.dec2_b = Tensor::zeros({cfg.decoder_hidden2}, true);
  p.dec3_w = glorot({cfg.pixels(), cfg.decoder_hidden2}, cfg.decoder_hidden2, cfg.pixels(), rng);
  p.dec3_b = Tensor::zeros({cfg.pixels()}, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> CapsNetParams::named() const {
  return {
      {"conv1.weight", conv1_w},       {"conv1.bias", conv1_b},
      {"primary.weight", primary_w},   {"primary.bias", primary_b},
      {"capsule.weight", caps_w},      {"decoder.fc1.weight", dec1_w},
      {"decoder.fc1.bias", dec1_b},    {"decoder.fc2.weight", dec2_w},
      {"decoder.fc2.bias", dec2_b},    {"decoder.out.weight", dec3_w},
      {"decoder.out.bias", dec3_b},
  };
}

std::vector<Tensor> CapsNetParams::all() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

void CapsNetParams::set_requires_grad(bool on) {
  for (Tensor t : all()) t.set_requires_grad(on);
}

int64_t CapsNetParams::count() const {
  int64_t n = 0;
  for (const Tensor& t : all()) n += t.size();
  return n;
}

void CapsNetParams::validate_shapes(const NetworkConfig& cfg) const {
  const int primary_ch = cfg.primary_types * cfg.primary_dim;
  const int caps_flat = cfg.num_classes * cfg.class_dim;
  expect_shape(conv1_w, {cfg.conv1_channels, 1, cfg.conv1_kernel, cfg.conv1_kernel}, "conv1.weight");
  expect_shape(conv1_b, {cfg.conv1_channels}, "conv1.bias");
  expect_shape(primary_w, {primary_ch, cfg.conv1_channels, cfg.primary_kernel, cfg.primary_kernel},
               "primary.weight");
  expect_shape(primary_b, {primary_ch}, "primary.bias");
  expect_shape(caps_w, {cfg.primary_count(), cfg.num_classes, cfg.class_dim, cfg.primary_dim},
               "capsule.weight");
  expect_shape(dec1_w, {cfg.decoder_hidden1, caps_flat}, "decoder.fc1.weight");
  expect_shape(dec1_b, {cfg.decoder_hidden1}, "decoder.fc1.bias");
  expect_shape(dec2_w, {cfg.decoder_hidden2, cfg.decoder_hidden1}, "decoder.fc2.weight");
  expect_shape(dec2_b, {cfg.decoder_hidden2}, "decoder.fc2.bias");
  expect_shape(dec3_w, {cfg.pixels(), cfg.decoder_hidden2}, "decoder.out.weight");
  expect_shape(dec3_b, {cfg.pixels()}, "decoder.out.bias");
}

CapsNetOutput capsnet_forward(const Tensor& x, const CapsNetParams& p, const NetworkConfig& cfg) {
  p.validate_shapes(cfg);
  if (x.ndim() != 4 || x.dim(1) != 1 || x.dim(2) != cfg.input_h || x.dim(3) != cfg.input_w) {
    throw ShapeError("capsnet_forward: input must be [N,1," + std::to_string(cfg.input_h) + "," +
                     std::to_string(cfg.input_w) + "], got " + shape_str(x.shape()));
  }
  const int n = x.dim(0);
  Tensor h1 = ops::relu(ops::conv2d(x, p.conv1_w, p.conv1_b, cfg.conv1_stride));
  Tensor h2 = ops::conv2d(h1, p.primary_w, p.primary_b, cfg.primary_stride);

  // Feature maps split into capsule groups: channel block t holds the
  // primary_dim components of capsule type t at every position.
  Tensor grouped = ops::reshape(
      h2, {n, cfg.primary_types, cfg.primary_dim, cfg.primary_out_h(), cfg.primary_out_w()});
  Tensor arranged = ops::permute(grouped, {0, 1, 3, 4, 2});
  Tensor u = ops::squash(ops::reshape(arranged, {n, cfg.primary_count(), cfg.primary_dim}));

  Tensor u_hat = ops::capsule_predict(p.caps_w, u);
  RoutingState routing = route(u_hat, cfg.routing_iterations, cfg.routing_enabled);
  Tensor v = routing.v;
  Tensor probs = ops::l2_norm(v);
  return {v, probs, std::move(routing)};
}

Tensor reconstruct(const Tensor& v, const std::vector<int>& rows, const CapsNetParams& p,
                   const NetworkConfig& cfg) {
  Tensor masked = ops::mask_rows(v, rows);
  Tensor flat = ops::reshape(masked, {v.dim(0), cfg.num_classes * cfg.class_dim});
  Tensor h1 = ops::relu(ops::linear(flat, p.dec1_w, p.dec1_b));
  Tensor h2 = ops::relu(ops::linear(h1, p.dec2_w, p.dec2_b));
  Tensor img = ops::sigmoid(ops::linear(h2, p.dec3_w, p.dec3_b));
  return ops::reshape(img, {v.dim(0), 1, cfg.input_h, cfg.input_w});
}

CapsNetLoss capsnet_loss(const Tensor& x, const CapsNetOutput& out, const std::vector<int>& labels,
                         const CapsNetParams& p, const NetworkConfig& cfg, bool mask_with_labels) {
  CapsNetLoss loss;
  loss.margin = ops::margin_loss(out.probs, labels, cfg.m_plus, cfg.m_minus, cfg.lambda_down);
  if (cfg.recon_mode == ReconMode::None) {
    loss.total = loss.margin;
    return loss;
  }
  const std::vector<int> rows = mask_with_labels ? labels : ops::argmax_rows(out.probs);
  Tensor image = reconstruct(out.v, rows, p, cfg);
  loss.recon = ops::scale(ops::mse_loss(image, x), static_cast<float>(cfg.pixels()));
  loss.total = ops::add(loss.margin, ops::scale(loss.recon, cfg.recon_weight()));
  return loss;
}

}  // namespace capslab
