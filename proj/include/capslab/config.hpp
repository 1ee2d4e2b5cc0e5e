#pragma once

#include <string>

#include "capslab/errors.hpp"

namespace capslab {

enum class ReconMode { None, Weak, Strong };

std::string to_string(ReconMode mode);
ReconMode recon_mode_from_string(const std::string& s);

// Capsule network hyperparameters. Shapes of every parameter tensor derive
// from these fields; validate() enforces the cross-field rules.
struct NetworkConfig {
  int input_h = 28;
  int input_w = 28;

  int conv1_channels = 256;
  int conv1_kernel = 9;
  int conv1_stride = 1;

  int primary_types = 32;  // capsule groups carved out of the second conv
  int primary_dim = 8;
  int primary_kernel = 9;
  int primary_stride = 2;

  int num_classes = 10;
  int class_dim = 16;

  int decoder_hidden1 = 512;
  int decoder_hidden2 = 1024;

  bool routing_enabled = true;
  int routing_iterations = 3;

  ReconMode recon_mode = ReconMode::Strong;
  float recon_weight_weak = 0.0005f;
  float recon_weight_strong = 20.0f * 0.0005f;

  float m_plus = 0.9f;
  float m_minus = 0.1f;
  float lambda_down = 0.5f;

  // Full-size layout of the source architecture.
  static NetworkConfig full();
  // Desk-scale default: narrower convs, same capsule geometry.
  static NetworkConfig tiny();
  // Miniature net for gradient checking: 12x12 input, 4 classes.
  static NetworkConfig micro();

  void validate() const;

  float recon_weight() const;

  int conv1_out_h() const { return (input_h - conv1_kernel) / conv1_stride + 1; }
  int conv1_out_w() const { return (input_w - conv1_kernel) / conv1_stride + 1; }
  int primary_out_h() const { return (conv1_out_h() - primary_kernel) / primary_stride + 1; }
  int primary_out_w() const { return (conv1_out_w() - primary_kernel) / primary_stride + 1; }
  int primary_count() const { return primary_types * primary_out_h() * primary_out_w(); }
  int pixels() const { return input_h * input_w; }

  // Short tag used in reports and artifact names, e.g. "routing-on_recon-strong".
  std::string id() const;
};

// Baseline convolutional classifier with a parameter/compute budget near the
// capsule network it is compared against.
struct CnnConfig {
  int input_h = 28;
  int input_w = 28;
  int num_classes = 10;

  int kernel = 5;
  int c1 = 256, s1 = 1;
  int c2 = 256, s2 = 1;
  int c3 = 128, s3 = 2;

  int fc1 = 328;
  int fc2 = 192;
  float dropout = 0.5f;

  static CnnConfig full();
  static CnnConfig tiny();

  void validate() const;

  int out1_h() const { return (input_h - kernel) / s1 + 1; }
  int out1_w() const { return (input_w - kernel) / s1 + 1; }
  int out2_h() const { return (out1_h() - kernel) / s2 + 1; }
  int out2_w() const { return (out1_w() - kernel) / s2 + 1; }
  int out3_h() const { return (out2_h() - kernel) / s3 + 1; }
  int out3_w() const { return (out2_w() - kernel) / s3 + 1; }
  int flat_dim() const { return c3 * out3_h() * out3_w(); }
};

}  // namespace capslab
