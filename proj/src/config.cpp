#include "capslab/config.hpp"

#include <cmath>

namespace capslab {

std::string to_string(ReconMode mode) {
  switch (mode) {
    case ReconMode::None:
      return "none";
    case ReconMode::Weak:
      return "weak";
    case ReconMode::Strong:
      return "strong";
  }
  throw UsageError("unknown reconstruction mode value");
}

ReconMode recon_mode_from_string(const std::string& s) {
  if (s == "none") return ReconMode::None;
  if (s == "weak") return ReconMode::Weak;
  if (s == "strong") return ReconMode::Strong;
  throw UsageError("reconstruction mode must be none|weak|strong, got '" + s + "'");
}

NetworkConfig NetworkConfig::full() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::tiny() {
  NetworkConfig c;
  c.conv1_channels = 32;
  c.primary_types = 8;
  return c;
}

NetworkConfig NetworkConfig::micro() {
  NetworkConfig c;
  c.input_h = 12;
  c.input_w = 12;
  c.conv1_channels = 8;
  c.conv1_kernel = 5;
  c.primary_types = 2;
  c.primary_dim = 4;
  c.primary_kernel = 5;
  c.num_classes = 4;
  c.class_dim = 4;
  c.decoder_hidden1 = 24;
  c.decoder_hidden2 = 32;
  return c;
}

void NetworkConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw UsageError(std::string("config: ") + name + " must be >= 1");
  };
  positive(input_h, "input_h");
  positive(input_w, "input_w");
  positive(conv1_channels, "conv1_channels");
  positive(conv1_kernel, "conv1_kernel");
  positive(conv1_stride, "conv1_stride");
  positive(primary_types, "primary_types");
  positive(primary_dim, "primary_dim");
  positive(primary_kernel, "primary_kernel");
  positive(primary_stride, "primary_stride");
  positive(num_classes, "num_classes");
  positive(class_dim, "class_dim");
  positive(decoder_hidden1, "decoder_hidden1");
  positive(decoder_hidden2, "decoder_hidden2");
  positive(routing_iterations, "routing_iterations");
  if (conv1_kernel > input_h || conv1_kernel > input_w) {
    throw UsageError("config: conv1 kernel exceeds the input extent");
  }
  if (primary_kernel > conv1_out_h() || primary_kernel > conv1_out_w()) {
    throw UsageError("config: primary kernel exceeds the first conv output extent");
  }
  if (recon_weight_weak < 0.0f) throw UsageError("config: recon_weight_weak must be >= 0");
  if (recon_weight_strong != 20.0f * recon_weight_weak) {
    throw UsageError("config: recon_weight_strong must equal 20 x recon_weight_weak");
  }
  if (!(m_plus > m_minus)) throw UsageError("config: m_plus must exceed m_minus");
  if (lambda_down < 0.0f) throw UsageError("config: lambda_down must be >= 0");
}

float NetworkConfig::recon_weight() const {
  switch (recon_mode) {
    case ReconMode::None:
      return 0.0f;
    case ReconMode::Weak:
      return recon_weight_weak;
    case ReconMode::Strong:
      return recon_weight_strong;
  }
  throw UsageError("unknown reconstruction mode value");
}

std::string NetworkConfig::id() const {
  return std::string("routing-") + (routing_enabled ? "on" : "off") + "_recon-" +
         to_string(recon_mode);
}

CnnConfig CnnConfig::full() { return CnnConfig{}; }

CnnConfig CnnConfig::tiny() {
  CnnConfig c;
  c.c1 = 32;
  c.s2 = 2;
  c.c2 = 32;
  c.c3 = 16;
  c.s3 = 1;
  return c;
}

void CnnConfig::validate() const {
  if (c1 < 1 || c2 < 1 || c3 < 1 || fc1 < 1 || fc2 < 1) {
    throw UsageError("config: layer widths must be >= 1");
  }
  if (dropout < 0.0f || dropout >= 1.0f) {
    throw UsageError("config: dropout must lie in [0,1)");
  }
  if (out3_h() < 1 || out3_w() < 1) {
    throw UsageError("config: conv stack consumes the whole input");
  }
}

}  // namespace capslab
