#include "support/reference.hpp"

#include <algorithm>
#include <cmath>

namespace capslab::testsup {
namespace {

// Valid cross-correlation, channels-first, matching ops::conv2d semantics.
void conv_ref(const std::vector<double>& x, int c, int h, int w, const std::vector<double>& wt,
              const std::vector<double>& b, int f, int k, int stride, bool relu_after,
              std::vector<double>& out, int& oh, int& ow) {
  oh = (h - k) / stride + 1;
  ow = (w - k) / stride + 1;
  out.assign(static_cast<size_t>(f) * oh * ow, 0.0);
  for (int jf = 0; jf < f; ++jf) {
    for (int io = 0; io < oh; ++io) {
      for (int jo = 0; jo < ow; ++jo) {
        double acc = 0.0;
        for (int ic = 0; ic < c; ++ic) {
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              acc += x[(static_cast<size_t>(ic) * h + io * stride + kh) * w + jo * stride + kw] *
                     wt[((static_cast<size_t>(jf) * c + ic) * k + kh) * k + kw];
            }
          }
        }
        acc += b[static_cast<size_t>(jf)];
        if (relu_after && acc < 0.0) acc = 0.0;
        out[(static_cast<size_t>(jf) * oh + io) * ow + jo] = acc;
      }
    }
  }
}

void squash_rows(std::vector<double>& rows, int lanes, int d) {
  for (int l = 0; l < lanes; ++l) {
    double sq = 0.0;
    for (int i = 0; i < d; ++i) {
      const double v = rows[static_cast<size_t>(l) * d + i];
      sq += v * v;
    }
    const double n = std::sqrt(sq);
    const double f = n / (1.0 + sq);
    for (int i = 0; i < d; ++i) rows[static_cast<size_t>(l) * d + i] *= f;
  }
}

}  // namespace

RefParams RefParams::from(const CapsNetParams& p) {
  RefParams rp;
  for (const auto& [name, t] : p.named()) {
    rp.v.emplace_back(t.data().begin(), t.data().end());
  }
  return rp;
}

double ref_capsnet_total_loss(const NetworkConfig& cfg, const RefParams& rp,
                              const std::vector<float>& images, const std::vector<int>& labels) {
  const int n = static_cast<int>(labels.size());
  const int px = cfg.pixels();
  const auto& conv1_w = rp.v[0];
  const auto& conv1_b = rp.v[1];
  const auto& primary_w = rp.v[2];
  const auto& primary_b = rp.v[3];
  const auto& caps_w = rp.v[4];
  const auto& dec1_w = rp.v[5];
  const auto& dec1_b = rp.v[6];
  const auto& dec2_w = rp.v[7];
  const auto& dec2_b = rp.v[8];
  const auto& dec3_w = rp.v[9];
  const auto& dec3_b = rp.v[10];

  const int t = cfg.primary_types, dp = cfg.primary_dim;
  const int j = cfg.num_classes, dc = cfg.class_dim;
  const int pcount = cfg.primary_count();
  const int iters = cfg.routing_enabled ? cfg.routing_iterations : 1;
  const int caps_flat = j * dc;

  double margin_total = 0.0, recon_total = 0.0;
  std::vector<double> a0(static_cast<size_t>(px)), a1, a2;
  for (int in = 0; in < n; ++in) {
    for (int i = 0; i < px; ++i) a0[static_cast<size_t>(i)] = images[static_cast<size_t>(in) * px + i];

    int h1 = 0, w1 = 0, ph = 0, pw = 0;
    conv_ref(a0, 1, cfg.input_h, cfg.input_w, conv1_w, conv1_b, cfg.conv1_channels,
             cfg.conv1_kernel, cfg.conv1_stride, true, a1, h1, w1);
    conv_ref(a1, cfg.conv1_channels, h1, w1, primary_w, primary_b, t * dp, cfg.primary_kernel,
             cfg.primary_stride, false, a2, ph, pw);

    // Capsule grouping: type block's dp channels at each position.
    std::vector<double> u(static_cast<size_t>(pcount) * dp);
    for (int it = 0; it < t; ++it) {
      for (int y = 0; y < ph; ++y) {
        for (int x = 0; x < pw; ++x) {
          const int p = (it * ph + y) * pw + x;
          for (int id = 0; id < dp; ++id) {
            u[static_cast<size_t>(p) * dp + id] =
                a2[(static_cast<size_t>(it * dp + id) * ph + y) * pw + x];
          }
        }
      }
    }
    squash_rows(u, pcount, dp);

    std::vector<double> uhat(static_cast<size_t>(pcount) * j * dc);
    for (int p = 0; p < pcount; ++p) {
      for (int ij = 0; ij < j; ++ij) {
        for (int ic = 0; ic < dc; ++ic) {
          double acc = 0.0;
          for (int id = 0; id < dp; ++id) {
            acc += caps_w[((static_cast<size_t>(p) * j + ij) * dc + ic) * dp + id] *
                   u[static_cast<size_t>(p) * dp + id];
          }
          uhat[(static_cast<size_t>(p) * j + ij) * dc + ic] = acc;
        }
      }
    }

    std::vector<double> b(static_cast<size_t>(pcount) * j, 0.0);
    std::vector<double> c(b.size()), s(static_cast<size_t>(j) * dc), v;
    for (int it = 0; it < iters; ++it) {
      for (int p = 0; p < pcount; ++p) {
        double mx = b[static_cast<size_t>(p) * j];
        for (int ij = 1; ij < j; ++ij) mx = std::max(mx, b[static_cast<size_t>(p) * j + ij]);
        double denom = 0.0;
        for (int ij = 0; ij < j; ++ij) {
          const double e = std::exp(b[static_cast<size_t>(p) * j + ij] - mx);
          c[static_cast<size_t>(p) * j + ij] = e;
          denom += e;
        }
        for (int ij = 0; ij < j; ++ij) c[static_cast<size_t>(p) * j + ij] /= denom;
      }
      std::fill(s.begin(), s.end(), 0.0);
      for (int p = 0; p < pcount; ++p) {
        for (int ij = 0; ij < j; ++ij) {
          const double cv = c[static_cast<size_t>(p) * j + ij];
          for (int ic = 0; ic < dc; ++ic) {
            s[static_cast<size_t>(ij) * dc + ic] +=
                cv * uhat[(static_cast<size_t>(p) * j + ij) * dc + ic];
          }
        }
      }
      v = s;
      squash_rows(v, j, dc);
      if (it + 1 < iters) {
        for (int p = 0; p < pcount; ++p) {
          for (int ij = 0; ij < j; ++ij) {
            double agree = 0.0;
            for (int ic = 0; ic < dc; ++ic) {
              agree += uhat[(static_cast<size_t>(p) * j + ij) * dc + ic] *
                       v[static_cast<size_t>(ij) * dc + ic];
            }
            b[static_cast<size_t>(p) * j + ij] += agree;
          }
        }
      }
    }

    std::vector<double> norms(static_cast<size_t>(j));
    for (int ij = 0; ij < j; ++ij) {
      double sq = 0.0;
      for (int ic = 0; ic < dc; ++ic) {
        const double x = v[static_cast<size_t>(ij) * dc + ic];
        sq += x * x;
      }
      norms[static_cast<size_t>(ij)] = std::sqrt(sq);
    }
    for (int k = 0; k < j; ++k) {
      if (k == labels[static_cast<size_t>(in)]) {
        const double d = std::max(0.0, cfg.m_plus - norms[static_cast<size_t>(k)]);
        margin_total += d * d;
      } else {
        const double d = std::max(0.0, norms[static_cast<size_t>(k)] - cfg.m_minus);
        margin_total += static_cast<double>(cfg.lambda_down) * d * d;
      }
    }

    if (cfg.recon_mode != ReconMode::None) {
      std::vector<double> flat(static_cast<size_t>(caps_flat), 0.0);
      const int row = labels[static_cast<size_t>(in)];
      for (int ic = 0; ic < dc; ++ic) {
        flat[static_cast<size_t>(row) * dc + ic] = v[static_cast<size_t>(row) * dc + ic];
      }
      auto dense = [](const std::vector<double>& in_v, const std::vector<double>& w,
                      const std::vector<double>& bias, int out_dim, bool relu_after) {
        const int in_dim = static_cast<int>(in_v.size());
        std::vector<double> out(static_cast<size_t>(out_dim));
        for (int o = 0; o < out_dim; ++o) {
          double acc = 0.0;
          for (int i = 0; i < in_dim; ++i) acc += in_v[static_cast<size_t>(i)] * w[static_cast<size_t>(o) * in_dim + i];
          acc += bias[static_cast<size_t>(o)];
          out[static_cast<size_t>(o)] = relu_after ? std::max(0.0, acc) : acc;
        }
        return out;
      };
      std::vector<double> d1 = dense(flat, dec1_w, dec1_b, cfg.decoder_hidden1, true);
      std::vector<double> d2 = dense(d1, dec2_w, dec2_b, cfg.decoder_hidden2, true);
      std::vector<double> img = dense(d2, dec3_w, dec3_b, px, false);
      double sse = 0.0;
      for (int i = 0; i < px; ++i) {
        const double y = 1.0 / (1.0 + std::exp(-img[static_cast<size_t>(i)]));
        const double d = y - a0[static_cast<size_t>(i)];
        sse += d * d;
      }
      recon_total += sse;
    }
  }

  double total = margin_total / n;
  if (cfg.recon_mode != ReconMode::None) {
    total += static_cast<double>(cfg.recon_weight()) * (recon_total / n);
  }
  return total;
}

}  // namespace capslab::testsup
