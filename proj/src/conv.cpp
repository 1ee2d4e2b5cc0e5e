#include <cstdint>
#include <string>
#include <vector>

#include "capslab/ops.hpp"

namespace capslab::ops {
namespace {

// Patch matrix for one sample: cols[k][op] with k = (c*KH + kh)*KW + kw and
// op = oh*OW + ow. The k ordering is what fixes the conv accumulation order.
void im2col(const float* x, int c, int h, int w, int kh, int kw, int stride, int oh, int ow,
            float* cols) {
  const int op_count = oh * ow;
  int k = 0;
  for (int ic = 0; ic < c; ++ic) {
    const float* plane = x + static_cast<size_t>(ic) * h * w;
    for (int ikh = 0; ikh < kh; ++ikh) {
      for (int ikw = 0; ikw < kw; ++ikw, ++k) {
        float* crow = cols + static_cast<size_t>(k) * op_count;
        for (int io = 0; io < oh; ++io) {
          const float* src = plane + static_cast<size_t>(io * stride + ikh) * w + ikw;
          for (int jo = 0; jo < ow; ++jo) crow[io * ow + jo] = src[static_cast<size_t>(jo) * stride];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.ndim() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.ndim() != 4) {
    throw ShapeError("conv2d: kernel must be [F,C,KH,KW], got " + shape_str(w.shape()));
  }
  if (stride < 1) throw UsageError("conv2d: stride " + std::to_string(stride) + " must be >= 1");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: kernel channels " + std::to_string(w.dim(1)) +
                     " do not match input channels " + std::to_string(x.dim(1)));
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), iw = x.dim(3);
  const int f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (kh > h || kw > iw) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " exceeds input " + std::to_string(h) + "x" + std::to_string(iw));
  }
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != f)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(f) + "], got " +
                     shape_str(b.shape()));
  }
  const int oh = (h - kh) / stride + 1;
  const int ow = (iw - kw) / stride + 1;
  const int k_total = c * kh * kw;
  const int op_count = oh * ow;

  std::vector<float> out(static_cast<size_t>(n) * f * op_count, 0.0f);
  std::vector<float> cols(static_cast<size_t>(k_total) * op_count);
  const float* px = x.data().data();
  const float* pw = w.data().data();  // [F,C,KH,KW] flattens to [F, k_total]
  const float* pb = b.defined() ? b.data().data() : nullptr;
  for (int in = 0; in < n; ++in) {
    im2col(px + static_cast<size_t>(in) * c * h * iw, c, h, iw, kh, kw, stride, oh, ow,
           cols.data());
    float* obase = out.data() + static_cast<size_t>(in) * f * op_count;
    for (int jf = 0; jf < f; ++jf) {
      float* orow = obase + static_cast<size_t>(jf) * op_count;
      const float* wrow = pw + static_cast<size_t>(jf) * k_total;
      for (int k = 0; k < k_total; ++k) {
        const float wv = wrow[k];
        const float* crow = cols.data() + static_cast<size_t>(k) * op_count;
        for (int io = 0; io < op_count; ++io) orow[io] += wv * crow[io];
      }
      if (pb) {
        const float bv = pb[jf];
        for (int io = 0; io < op_count; ++io) orow[io] += bv;
      }
    }
  }

  return make_op_output(
      {n, f, oh, ow}, std::move(out), {x, w, b},
      [x, w, b, n, c, h, iw, f, kh, kw, stride, oh, ow, k_total, op_count](TensorImpl& self) {
        const float* g = self.grad.data();
        const bool want_x = x.impl()->requires_grad;
        const bool want_w = w.impl()->requires_grad;
        const bool want_b = b.defined() && b.impl()->requires_grad;

        if (want_b) {
          if (b.impl()->grad.empty()) b.impl()->grad.assign(b.impl()->data.size(), 0.0f);
          float* gb = b.impl()->grad.data();
          for (int in = 0; in < n; ++in) {
            for (int jf = 0; jf < f; ++jf) {
              const float* grow = g + (static_cast<size_t>(in) * f + jf) * op_count;
              float acc = 0.0f;
              for (int io = 0; io < op_count; ++io) acc += grow[io];
              gb[jf] += acc;
            }
          }
        }
        if (!want_x && !want_w) return;

        const float* px = x.impl()->data.data();
        const float* pw = w.impl()->data.data();
        if (want_w && w.impl()->grad.empty()) w.impl()->grad.assign(w.impl()->data.size(), 0.0f);
        if (want_x && x.impl()->grad.empty()) x.impl()->grad.assign(x.impl()->data.size(), 0.0f);
        float* gw = want_w ? w.impl()->grad.data() : nullptr;
        float* gx = want_x ? x.impl()->grad.data() : nullptr;

        std::vector<float> cols(static_cast<size_t>(k_total) * op_count);
        std::vector<float> cols_t;  // [op, k], built only for the weight grad
        if (want_w) cols_t.resize(cols.size());
        std::vector<float> wt;  // [k, f], built only for the input grad
        if (want_x) {
          wt.resize(static_cast<size_t>(k_total) * f);
          for (int jf = 0; jf < f; ++jf)
            for (int k = 0; k < k_total; ++k)
              wt[static_cast<size_t>(k) * f + jf] = pw[static_cast<size_t>(jf) * k_total + k];
        }
        std::vector<float> gcols(want_x ? cols.size() : 0);

        for (int in = 0; in < n; ++in) {
          im2col(px + static_cast<size_t>(in) * c * h * iw, c, h, iw, kh, kw, stride, oh, ow,
                 cols.data());
          const float* gbase = g + static_cast<size_t>(in) * f * op_count;
          if (want_w) {
            for (int k = 0; k < k_total; ++k)
              for (int io = 0; io < op_count; ++io)
                cols_t[static_cast<size_t>(io) * k_total + k] =
                    cols[static_cast<size_t>(k) * op_count + io];
            for (int jf = 0; jf < f; ++jf) {
              const float* grow = gbase + static_cast<size_t>(jf) * op_count;
              float* gwrow = gw + static_cast<size_t>(jf) * k_total;
              for (int io = 0; io < op_count; ++io) {
                const float gv = grow[io];
                const float* crow = cols_t.data() + static_cast<size_t>(io) * k_total;
                for (int k = 0; k < k_total; ++k) gwrow[k] += gv * crow[k];
              }
            }
          }
          if (want_x) {
            std::fill(gcols.begin(), gcols.end(), 0.0f);
            for (int k = 0; k < k_total; ++k) {
              const float* wrow = wt.data() + static_cast<size_t>(k) * f;
              float* gcrow = gcols.data() + static_cast<size_t>(k) * op_count;
              for (int jf = 0; jf < f; ++jf) {
                const float wv = wrow[jf];
                const float* grow = gbase + static_cast<size_t>(jf) * op_count;
                for (int io = 0; io < op_count; ++io) gcrow[io] += wv * grow[io];
              }
            }
            // col2im scatter; overlapping patches accumulate in fixed k order.
            float* gxs = gx + static_cast<size_t>(in) * c * h * iw;
            int k = 0;
            for (int ic = 0; ic < c; ++ic) {
              float* plane = gxs + static_cast<size_t>(ic) * h * iw;
              for (int ikh = 0; ikh < kh; ++ikh) {
                for (int ikw = 0; ikw < kw; ++ikw, ++k) {
                  const float* gcrow = gcols.data() + static_cast<size_t>(k) * op_count;
                  for (int io = 0; io < oh; ++io) {
                    float* dst = plane + static_cast<size_t>(io * stride + ikh) * iw + ikw;
                    for (int jo = 0; jo < ow; ++jo)
                      dst[static_cast<size_t>(jo) * stride] += gcrow[io * ow + jo];
                  }
                }
              }
            }
          }
        }
      },
      "conv2d");
}

}  // namespace capslab::ops
