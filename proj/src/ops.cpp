#include "capslab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace capslab::ops {
namespace {

bool needs(const std::shared_ptr<TensorImpl>& t) { return t->requires_grad; }

std::span<float> gbuf(const std::shared_ptr<TensorImpl>& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0f);
  return t->grad;
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

void expect_ndim(const Tensor& t, int nd, const char* op, const char* role) {
  if (t.ndim() != nd) {
    throw ShapeError(std::string(op) + ": " + role + " must have " + std::to_string(nd) +
                     " axes, got " + shape_str(t.shape()));
  }
}

void expect_axis(int got, int want, const char* op, const char* what) {
  if (got != want) {
    throw ShapeError(std::string(op) + ": " + what + " is " + std::to_string(got) + ", expected " +
                     std::to_string(want));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "add");
  std::vector<float> out(a.data().begin(), a.data().end());
  const float* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return make_op_output(
      a.shape(), std::move(out), {a, b},
      [a, b](TensorImpl& self) {
        if (needs(a.impl())) accumulate_grad(*a.impl(), self.grad);
        if (needs(b.impl())) accumulate_grad(*b.impl(), self.grad);
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "sub");
  std::vector<float> out(a.data().begin(), a.data().end());
  const float* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return make_op_output(
      a.shape(), std::move(out), {a, b},
      [a, b](TensorImpl& self) {
        if (needs(a.impl())) accumulate_grad(*a.impl(), self.grad);
        if (needs(b.impl())) {
          std::span<float> g = gbuf(b.impl());
          for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "mul");
  std::vector<float> out(a.size());
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return make_op_output(
      a.shape(), std::move(out), {a, b},
      [a, b](TensorImpl& self) {
        if (needs(a.impl())) {
          std::span<float> g = gbuf(a.impl());
          const float* pb = b.impl()->data.data();
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb[i];
        }
        if (needs(b.impl())) {
          std::span<float> g = gbuf(b.impl());
          const float* pa = a.impl()->data.data();
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (float& x : out) x *= s;
  return make_op_output(
      a.shape(), std::move(out), {a},
      [a, s](TensorImpl& self) {
        if (!needs(a.impl())) return;
        std::span<float> g = gbuf(a.impl());
        for (size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
      },
      "scale");
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.size());
  const float* px = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = px[i] > 0.0f ? px[i] : 0.0f;
  return make_op_output(
      x.shape(), std::move(out), {x},
      [x](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> g = gbuf(x.impl());
        const float* px = x.impl()->data.data();
        for (size_t i = 0; i < g.size(); ++i) {
          if (px[i] > 0.0f) g[i] += self.grad[i];
        }
      },
      "relu");
}

Tensor sigmoid(const Tensor& x) {
  std::vector<float> out(x.size());
  const float* px = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) {
    float v = px[i];
    if (v >= 0.0f) {
      out[i] = 1.0f / (1.0f + std::exp(-v));
    } else {
      float e = std::exp(v);
      out[i] = e / (1.0f + e);
    }
  }
  return make_op_output(
      x.shape(), std::move(out), {x},
      [x](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> g = gbuf(x.impl());
        const float* y = self.data.data();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (1.0f - y[i]);
      },
      "sigmoid");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_op_output(
      {1}, {static_cast<float>(acc)}, {x},
      [x](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> g = gbuf(x.impl());
        const float g0 = self.grad[0];
        for (size_t i = 0; i < g.size(); ++i) g[i] += g0;
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: tensor is empty");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const float inv = 1.0f / static_cast<float>(x.size());
  return make_op_output(
      {1}, {static_cast<float>(acc / static_cast<double>(x.size()))}, {x},
      [x, inv](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> g = gbuf(x.impl());
        const float g0 = self.grad[0] * inv;
        for (size_t i = 0; i < g.size(); ++i) g[i] += g0;
      },
      "mean");
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 axis in " + shape_str(new_shape));
      infer = static_cast<int>(i);
    } else if (new_shape[i] <= 0) {
      throw ShapeError("reshape: axis " + std::to_string(i) + " is " +
                       std::to_string(new_shape[i]));
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.size() % known != 0) {
      throw ShapeError("reshape: cannot infer axis " + std::to_string(infer) + " for " +
                       std::to_string(x.size()) + " elements in " + shape_str(new_shape));
    }
    new_shape[static_cast<size_t>(infer)] = static_cast<int>(x.size() / known);
  } else if (known != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " has " + std::to_string(x.size()) +
                     " elements, target " + shape_str(new_shape) + " wants " +
                     std::to_string(known));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_op_output(
      std::move(new_shape), std::move(out), {x},
      [x](TensorImpl& self) {
        if (needs(x.impl())) accumulate_grad(*x.impl(), self.grad);
      },
      "reshape");
}

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
  const int nd = x.ndim();
  if (static_cast<int>(dims.size()) != nd) {
    throw ShapeError("permute: got " + std::to_string(dims.size()) + " axes for " +
                     shape_str(x.shape()));
  }
  std::vector<bool> seen(static_cast<size_t>(nd), false);
  for (int d : dims) {
    if (d < 0 || d >= nd || seen[static_cast<size_t>(d)]) {
      throw ShapeError("permute: axis list is not a permutation of 0.." + std::to_string(nd - 1));
    }
    seen[static_cast<size_t>(d)] = true;
  }

  std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * x.shape()[static_cast<size_t>(i + 1)];
  }
  Shape out_shape(static_cast<size_t>(nd));
  std::vector<int64_t> src_stride(static_cast<size_t>(nd));  // stride in x per out axis
  for (int i = 0; i < nd; ++i) {
    out_shape[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(dims[static_cast<size_t>(i)])];
    src_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(dims[static_cast<size_t>(i)])];
  }

  // Walk output positions in order, tracking the matching input offset.
  const int64_t total = x.size();
  std::vector<float> out(static_cast<size_t>(total));
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  const float* px = x.data().data();
  int64_t src = 0;
  for (int64_t o = 0; o < total; ++o) {
    out[static_cast<size_t>(o)] = px[src];
    for (int ax = nd - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      src += src_stride[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
      src -= src_stride[static_cast<size_t>(ax)] * out_shape[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
  return make_op_output(
      out_shape, std::move(out), {x},
      [x, out_shape, src_stride](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> g = gbuf(x.impl());
        const int nd2 = static_cast<int>(out_shape.size());
        std::vector<int64_t> idx(static_cast<size_t>(nd2), 0);
        int64_t src = 0;
        const int64_t total = static_cast<int64_t>(self.grad.size());
        for (int64_t o = 0; o < total; ++o) {
          g[static_cast<size_t>(src)] += self.grad[static_cast<size_t>(o)];
          for (int ax = nd2 - 1; ax >= 0; --ax) {
            idx[static_cast<size_t>(ax)]++;
            src += src_stride[static_cast<size_t>(ax)];
            if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
            src -= src_stride[static_cast<size_t>(ax)] * out_shape[static_cast<size_t>(ax)];
            idx[static_cast<size_t>(ax)] = 0;
          }
        }
      },
      "permute");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect_ndim(a, 2, "matmul", "lhs");
  expect_ndim(b, 2, "matmul", "rhs");
  expect_axis(b.dim(0), a.dim(1), "matmul", "rhs rows");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  for (int i = 0; i < m; ++i) {
    float* orow = out.data() + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const float av = pa[static_cast<size_t>(i) * k + kk];
      const float* brow = pb + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_op_output(
      {m, n}, std::move(out), {a, b},
      [a, b, m, k, n](TensorImpl& self) {
        const float* g = self.grad.data();
        if (needs(a.impl())) {
          std::span<float> ga = gbuf(a.impl());
          const float* pb = b.impl()->data.data();
          for (int i = 0; i < m; ++i) {
            for (int kk = 0; kk < k; ++kk) {
              const float* brow = pb + static_cast<size_t>(kk) * n;
              const float* grow = g + static_cast<size_t>(i) * n;
              float acc = 0.0f;
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[static_cast<size_t>(i) * k + kk] += acc;
            }
          }
        }
        if (needs(b.impl())) {
          std::span<float> gb = gbuf(b.impl());
          const float* pa = a.impl()->data.data();
          for (int i = 0; i < m; ++i) {
            const float* grow = g + static_cast<size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
              const float av = pa[static_cast<size_t>(i) * k + kk];
              float* gbrow = gb.data() + static_cast<size_t>(kk) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
      },
      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  expect_ndim(x, 2, "linear", "input");
  expect_ndim(w, 2, "linear", "weight");
  expect_ndim(b, 1, "linear", "bias");
  expect_axis(w.dim(1), x.dim(1), "linear", "weight columns");
  expect_axis(b.dim(0), w.dim(0), "linear", "bias length");
  const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);

  // Transposed weight copy keeps the inner loop contiguous without touching
  // the per-element accumulation order (ascending input index, bias last).
  std::vector<float> wt(static_cast<size_t>(in) * out_dim);
  const float* pw = w.data().data();
  for (int o = 0; o < out_dim; ++o)
    for (int i = 0; i < in; ++i)
      wt[static_cast<size_t>(i) * out_dim + o] = pw[static_cast<size_t>(o) * in + i];

  std::vector<float> out(static_cast<size_t>(n) * out_dim, 0.0f);
  const float* px = x.data().data();
  const float* pb = b.data().data();
  for (int s = 0; s < n; ++s) {
    float* orow = out.data() + static_cast<size_t>(s) * out_dim;
    const float* xrow = px + static_cast<size_t>(s) * in;
    for (int i = 0; i < in; ++i) {
      const float xv = xrow[i];
      const float* wrow = wt.data() + static_cast<size_t>(i) * out_dim;
      for (int o = 0; o < out_dim; ++o) orow[o] += xv * wrow[o];
    }
    for (int o = 0; o < out_dim; ++o) orow[o] += pb[o];
  }
  return make_op_output(
      {n, out_dim}, std::move(out), {x, w, b},
      [x, w, b, n, in, out_dim](TensorImpl& self) {
        const float* g = self.grad.data();
        if (needs(x.impl())) {
          std::span<float> gx = gbuf(x.impl());
          const float* pw = w.impl()->data.data();
          for (int s = 0; s < n; ++s) {
            float* gxrow = gx.data() + static_cast<size_t>(s) * in;
            const float* grow = g + static_cast<size_t>(s) * out_dim;
            for (int o = 0; o < out_dim; ++o) {
              const float gv = grow[o];
              const float* wrow = pw + static_cast<size_t>(o) * in;
              for (int i = 0; i < in; ++i) gxrow[i] += gv * wrow[i];
            }
          }
        }
        if (needs(w.impl())) {
          std::span<float> gw = gbuf(w.impl());
          const float* px = x.impl()->data.data();
          for (int s = 0; s < n; ++s) {
            const float* grow = g + static_cast<size_t>(s) * out_dim;
            const float* xrow = px + static_cast<size_t>(s) * in;
            for (int o = 0; o < out_dim; ++o) {
              const float gv = grow[o];
              float* gwrow = gw.data() + static_cast<size_t>(o) * in;
              for (int i = 0; i < in; ++i) gwrow[i] += gv * xrow[i];
            }
          }
        }
        if (needs(b.impl())) {
          std::span<float> gb = gbuf(b.impl());
          for (int s = 0; s < n; ++s) {
            const float* grow = g + static_cast<size_t>(s) * out_dim;
            for (int o = 0; o < out_dim; ++o) gb[static_cast<size_t>(o)] += grow[o];
          }
        }
      },
      "linear");
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim()) {
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  }
  int64_t outer = 1, inner = 1;
  const int lane = x.shape()[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.shape()[static_cast<size_t>(i)];

  std::vector<float> out(x.size());
  const float* px = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * lane * inner + in;
      float mx = px[base];
      for (int c = 1; c < lane; ++c) mx = std::max(mx, px[base + c * inner]);
      double denom = 0.0;
      for (int c = 0; c < lane; ++c) {
        const float e = std::exp(px[base + c * inner] - mx);
        out[static_cast<size_t>(base + c * inner)] = e;
        denom += e;
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int c = 0; c < lane; ++c) out[static_cast<size_t>(base + c * inner)] *= inv;
    }
  }
  return make_op_output(
      x.shape(), std::move(out), {x},
      [x, outer, inner, lane](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> gx = gbuf(x.impl());
        const float* y = self.data.data();
        const float* g = self.grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * lane * inner + in;
            double dot = 0.0;
            for (int c = 0; c < lane; ++c) {
              const int64_t k = base + c * inner;
              dot += static_cast<double>(g[k]) * y[k];
            }
            for (int c = 0; c < lane; ++c) {
              const int64_t k = base + c * inner;
              gx[static_cast<size_t>(k)] += y[k] * (g[k] - static_cast<float>(dot));
            }
          }
        }
      },
      "softmax");
}

Tensor l2_norm(const Tensor& x) {
  if (x.ndim() < 1) throw ShapeError("l2_norm: tensor has no axes");
  const int d = x.shape().back();
  const int64_t lanes = x.size() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};

  std::vector<float> out(static_cast<size_t>(lanes));
  const float* px = x.data().data();
  for (int64_t l = 0; l < lanes; ++l) {
    const float* row = px + l * d;
    double sq = 0.0;
    for (int i = 0; i < d; ++i) sq += static_cast<double>(row[i]) * row[i];
    out[static_cast<size_t>(l)] = static_cast<float>(std::sqrt(sq));
  }
  return make_op_output(
      std::move(out_shape), std::move(out), {x},
      [x, lanes, d](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> gx = gbuf(x.impl());
        const float* px = x.impl()->data.data();
        const float* norms = self.data.data();
        const float* g = self.grad.data();
        for (int64_t l = 0; l < lanes; ++l) {
          const float nv = norms[l];
          if (nv < 1e-12f) continue;  // zero vector: subgradient 0
          const float s = g[l] / nv;
          const float* row = px + l * d;
          float* grow = gx.data() + l * d;
          for (int i = 0; i < d; ++i) grow[i] += s * row[i];
        }
      },
      "l2_norm");
}

Tensor squash(const Tensor& s) {
  if (s.ndim() < 1) throw ShapeError("squash: tensor has no axes");
  const int d = s.shape().back();
  if (d < 1) throw ShapeError("squash: empty capsule axis in " + shape_str(s.shape()));
  const int64_t lanes = s.size() / d;

  std::vector<float> out(s.size());
  std::vector<float> norms(static_cast<size_t>(lanes));
  const float* ps = s.data().data();
  for (int64_t l = 0; l < lanes; ++l) {
    const float* row = ps + l * d;
    double sq = 0.0;
    for (int i = 0; i < d; ++i) sq += static_cast<double>(row[i]) * row[i];
    const double n = std::sqrt(sq);
    norms[static_cast<size_t>(l)] = static_cast<float>(n);
    const float f = static_cast<float>(n / (1.0 + sq));  // |s|/(1+|s|^2)
    float* orow = out.data() + l * d;
    for (int i = 0; i < d; ++i) orow[i] = f * row[i];
  }
  return make_op_output(
      s.shape(), std::move(out), {s},
      [s, lanes, d, norms = std::move(norms)](TensorImpl& self) {
        if (!needs(s.impl())) return;
        std::span<float> gs = gbuf(s.impl());
        const float* ps = s.impl()->data.data();
        const float* g = self.grad.data();
        for (int64_t l = 0; l < lanes; ++l) {
          const double n = norms[static_cast<size_t>(l)];
          const float* row = ps + l * d;
          const float* grow = g + l * d;
          float* gsrow = gs.data() + l * d;
          if (n < 1e-12) continue;  // squash is ~0 with vanishing slope there
          const double n2 = n * n;
          const double f = n / (1.0 + n2);
          const double fp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
          double sg = 0.0;
          for (int i = 0; i < d; ++i) sg += static_cast<double>(row[i]) * grow[i];
          const float c1 = static_cast<float>(f);
          const float c2 = static_cast<float>(fp / n * sg);
          for (int i = 0; i < d; ++i) gsrow[i] += c1 * grow[i] + c2 * row[i];
        }
      },
      "squash");
}

Tensor capsule_predict(const Tensor& w, const Tensor& u) {
  expect_ndim(w, 4, "capsule_predict", "weight");
  expect_ndim(u, 3, "capsule_predict", "input");
  expect_axis(u.dim(1), w.dim(0), "capsule_predict", "input capsule count");
  expect_axis(w.dim(3), u.dim(2), "capsule_predict", "weight input dim");
  const int n = u.dim(0), p = w.dim(0), j = w.dim(1), dc = w.dim(2), dp = w.dim(3);

  std::vector<float> out(static_cast<size_t>(n) * p * j * dc, 0.0f);
  const float* pw = w.data().data();
  const float* pu = u.data().data();
  for (int in = 0; in < n; ++in) {
    for (int ip = 0; ip < p; ++ip) {
      const float* urow = pu + (static_cast<size_t>(in) * p + ip) * dp;
      const float* wbase = pw + static_cast<size_t>(ip) * j * dc * dp;
      float* obase = out.data() + (static_cast<size_t>(in) * p + ip) * j * dc;
      for (int ij = 0; ij < j; ++ij) {
        for (int ic = 0; ic < dc; ++ic) {
          const float* wrow = wbase + (static_cast<size_t>(ij) * dc + ic) * dp;
          float acc = 0.0f;
          for (int id = 0; id < dp; ++id) acc += wrow[id] * urow[id];
          obase[static_cast<size_t>(ij) * dc + ic] = acc;
        }
      }
    }
  }
  return make_op_output(
      {n, p, j, dc}, std::move(out), {w, u},
      [w, u, n, p, j, dc, dp](TensorImpl& self) {
        const float* g = self.grad.data();
        const bool want_w = needs(w.impl());
        const bool want_u = needs(u.impl());
        std::span<float> gw = want_w ? gbuf(w.impl()) : std::span<float>{};
        std::span<float> gu = want_u ? gbuf(u.impl()) : std::span<float>{};
        const float* pw = w.impl()->data.data();
        const float* pu = u.impl()->data.data();
        for (int in = 0; in < n; ++in) {
          for (int ip = 0; ip < p; ++ip) {
            const float* urow = pu + (static_cast<size_t>(in) * p + ip) * dp;
            const float* grow = g + (static_cast<size_t>(in) * p + ip) * j * dc;
            for (int ij = 0; ij < j; ++ij) {
              for (int ic = 0; ic < dc; ++ic) {
                const float gv = grow[static_cast<size_t>(ij) * dc + ic];
                const size_t wof = (static_cast<size_t>(ip) * j * dc + static_cast<size_t>(ij) * dc + ic) *
                                   static_cast<size_t>(dp);
                if (want_w) {
                  float* gwrow = gw.data() + wof;
                  for (int id = 0; id < dp; ++id) gwrow[id] += gv * urow[id];
                }
                if (want_u) {
                  float* gurow = gu.data() + (static_cast<size_t>(in) * p + ip) * dp;
                  const float* wrow = pw + wof;
                  for (int id = 0; id < dp; ++id) gurow[id] += gv * wrow[id];
                }
              }
            }
          }
        }
      },
      "capsule_predict");
}

Tensor route_weighted_sum(const Tensor& c, const Tensor& u_hat) {
  expect_ndim(c, 3, "route_weighted_sum", "couplings");
  expect_ndim(u_hat, 4, "route_weighted_sum", "predictions");
  for (int ax = 0; ax < 3; ++ax) {
    if (c.dim(ax) != u_hat.dim(ax)) {
      throw ShapeError("route_weighted_sum: axis " + std::to_string(ax) + " differs: " +
                       shape_str(c.shape()) + " vs " + shape_str(u_hat.shape()));
    }
  }
  const int n = c.dim(0), p = c.dim(1), j = c.dim(2), d = u_hat.dim(3);

  std::vector<float> out(static_cast<size_t>(n) * j * d, 0.0f);
  const float* pc = c.data().data();
  const float* pu = u_hat.data().data();
  for (int in = 0; in < n; ++in) {
    for (int ip = 0; ip < p; ++ip) {
      for (int ij = 0; ij < j; ++ij) {
        const float cv = pc[(static_cast<size_t>(in) * p + ip) * j + ij];
        const float* urow = pu + ((static_cast<size_t>(in) * p + ip) * j + ij) * d;
        float* orow = out.data() + (static_cast<size_t>(in) * j + ij) * d;
        for (int id = 0; id < d; ++id) orow[id] += cv * urow[id];
      }
    }
  }
  return make_op_output(
      {n, j, d}, std::move(out), {c, u_hat},
      [c, u_hat, n, p, j, d](TensorImpl& self) {
        const float* g = self.grad.data();
        if (needs(c.impl())) {
          std::span<float> gc = gbuf(c.impl());
          const float* pu = u_hat.impl()->data.data();
          for (int in = 0; in < n; ++in) {
            for (int ip = 0; ip < p; ++ip) {
              for (int ij = 0; ij < j; ++ij) {
                const float* urow = pu + ((static_cast<size_t>(in) * p + ip) * j + ij) * d;
                const float* grow = g + (static_cast<size_t>(in) * j + ij) * d;
                float acc = 0.0f;
                for (int id = 0; id < d; ++id) acc += urow[id] * grow[id];
                gc[(static_cast<size_t>(in) * p + ip) * j + ij] += acc;
              }
            }
          }
        }
        if (needs(u_hat.impl())) {
          std::span<float> gu = gbuf(u_hat.impl());
          const float* pc = c.impl()->data.data();
          for (int in = 0; in < n; ++in) {
            for (int ip = 0; ip < p; ++ip) {
              for (int ij = 0; ij < j; ++ij) {
                const float cv = pc[(static_cast<size_t>(in) * p + ip) * j + ij];
                const float* grow = g + (static_cast<size_t>(in) * j + ij) * d;
                float* gurow = gu.data() + ((static_cast<size_t>(in) * p + ip) * j + ij) * d;
                for (int id = 0; id < d; ++id) gurow[id] += cv * grow[id];
              }
            }
          }
        }
      },
      "route_weighted_sum");
}

Tensor route_agreement(const Tensor& u_hat, const Tensor& v) {
  expect_ndim(u_hat, 4, "route_agreement", "predictions");
  expect_ndim(v, 3, "route_agreement", "outputs");
  expect_axis(v.dim(0), u_hat.dim(0), "route_agreement", "batch");
  expect_axis(v.dim(1), u_hat.dim(2), "route_agreement", "capsule count");
  expect_axis(v.dim(2), u_hat.dim(3), "route_agreement", "capsule dim");
  const int n = u_hat.dim(0), p = u_hat.dim(1), j = u_hat.dim(2), d = u_hat.dim(3);

  std::vector<float> out(static_cast<size_t>(n) * p * j);
  const float* pu = u_hat.data().data();
  const float* pv = v.data().data();
  for (int in = 0; in < n; ++in) {
    for (int ip = 0; ip < p; ++ip) {
      for (int ij = 0; ij < j; ++ij) {
        const float* urow = pu + ((static_cast<size_t>(in) * p + ip) * j + ij) * d;
        const float* vrow = pv + (static_cast<size_t>(in) * j + ij) * d;
        float acc = 0.0f;
        for (int id = 0; id < d; ++id) acc += urow[id] * vrow[id];
        out[(static_cast<size_t>(in) * p + ip) * j + ij] = acc;
      }
    }
  }
  return make_op_output(
      {n, p, j}, std::move(out), {u_hat, v},
      [u_hat, v, n, p, j, d](TensorImpl& self) {
        const float* g = self.grad.data();
        if (needs(u_hat.impl())) {
          std::span<float> gu = gbuf(u_hat.impl());
          const float* pv = v.impl()->data.data();
          for (int in = 0; in < n; ++in) {
            for (int ip = 0; ip < p; ++ip) {
              for (int ij = 0; ij < j; ++ij) {
                const float gv = g[(static_cast<size_t>(in) * p + ip) * j + ij];
                const float* vrow = pv + (static_cast<size_t>(in) * j + ij) * d;
                float* gurow = gu.data() + ((static_cast<size_t>(in) * p + ip) * j + ij) * d;
                for (int id = 0; id < d; ++id) gurow[id] += gv * vrow[id];
              }
            }
          }
        }
        if (needs(v.impl())) {
          std::span<float> gvb = gbuf(v.impl());
          const float* pu = u_hat.impl()->data.data();
          for (int in = 0; in < n; ++in) {
            for (int ip = 0; ip < p; ++ip) {
              for (int ij = 0; ij < j; ++ij) {
                const float gv = g[(static_cast<size_t>(in) * p + ip) * j + ij];
                const float* urow = pu + ((static_cast<size_t>(in) * p + ip) * j + ij) * d;
                float* gvrow = gvb.data() + (static_cast<size_t>(in) * j + ij) * d;
                for (int id = 0; id < d; ++id) gvrow[id] += gv * urow[id];
              }
            }
          }
        }
      },
      "route_agreement");
}

Tensor mask_rows(const Tensor& x, const std::vector<int>& rows) {
  expect_ndim(x, 3, "mask_rows", "input");
  const int n = x.dim(0), j = x.dim(1), d = x.dim(2);
  if (static_cast<int>(rows.size()) != n) {
    throw ShapeError("mask_rows: got " + std::to_string(rows.size()) + " row indices for batch " +
                     std::to_string(n));
  }
  for (int in = 0; in < n; ++in) {
    if (rows[static_cast<size_t>(in)] < 0 || rows[static_cast<size_t>(in)] >= j) {
      throw UsageError("mask_rows: row index " + std::to_string(rows[static_cast<size_t>(in)]) +
                       " out of range [0," + std::to_string(j) + ") at sample " +
                       std::to_string(in));
    }
  }
  std::vector<float> out(x.size(), 0.0f);
  const float* px = x.data().data();
  for (int in = 0; in < n; ++in) {
    const size_t of = (static_cast<size_t>(in) * j + static_cast<size_t>(rows[static_cast<size_t>(in)])) * d;
    for (int id = 0; id < d; ++id) out[of + id] = px[of + id];
  }
  return make_op_output(
      x.shape(), std::move(out), {x},
      [x, rows, j, d](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> g = gbuf(x.impl());
        const int n = static_cast<int>(rows.size());
        for (int in = 0; in < n; ++in) {
          const size_t of =
              (static_cast<size_t>(in) * j + static_cast<size_t>(rows[static_cast<size_t>(in)])) * d;
          for (int id = 0; id < d; ++id) g[of + id] += self.grad[of + id];
        }
      },
      "mask_rows");
}

Tensor margin_loss(const Tensor& norms, const std::vector<int>& labels, float m_pos, float m_neg,
                   float lambda_neg) {
  expect_ndim(norms, 2, "margin_loss", "norms");
  const int n = norms.dim(0), j = norms.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("margin_loss: got " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(n));
  }
  for (int in = 0; in < n; ++in) {
    if (labels[static_cast<size_t>(in)] < 0 || labels[static_cast<size_t>(in)] >= j) {
      throw UsageError("margin_loss: label " + std::to_string(labels[static_cast<size_t>(in)]) +
                       " out of range [0," + std::to_string(j) + ") at sample " +
                       std::to_string(in));
    }
  }
  const float* pn = norms.data().data();
  double total = 0.0;
  for (int in = 0; in < n; ++in) {
    for (int k = 0; k < j; ++k) {
      const float xv = pn[static_cast<size_t>(in) * j + k];
      if (k == labels[static_cast<size_t>(in)]) {
        const float dlt = std::max(0.0f, m_pos - xv);
        total += static_cast<double>(dlt) * dlt;
      } else {
        const float dlt = std::max(0.0f, xv - m_neg);
        total += static_cast<double>(lambda_neg) * dlt * dlt;
      }
    }
  }
  return make_op_output(
      {1}, {static_cast<float>(total / n)}, {norms},
      [norms, labels, m_pos, m_neg, lambda_neg, n, j](TensorImpl& self) {
        if (!needs(norms.impl())) return;
        std::span<float> g = gbuf(norms.impl());
        const float* pn = norms.impl()->data.data();
        const float g0 = self.grad[0] / static_cast<float>(n);
        for (int in = 0; in < n; ++in) {
          for (int k = 0; k < j; ++k) {
            const size_t of = static_cast<size_t>(in) * j + k;
            const float xv = pn[of];
            if (k == labels[static_cast<size_t>(in)]) {
              const float dlt = std::max(0.0f, m_pos - xv);
              g[of] += g0 * (-2.0f * dlt);
            } else {
              const float dlt = std::max(0.0f, xv - m_neg);
              g[of] += g0 * (lambda_neg * 2.0f * dlt);
            }
          }
        }
      },
      "margin_loss");
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "mse_loss");
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  double total = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double dv = static_cast<double>(pa[i]) - pb[i];
    total += dv * dv;
  }
  const float inv = 1.0f / static_cast<float>(a.size());
  return make_op_output(
      {1}, {static_cast<float>(total / static_cast<double>(a.size()))}, {a, b},
      [a, b, inv](TensorImpl& self) {
        const float g0 = self.grad[0];
        const float* pa = a.impl()->data.data();
        const float* pb = b.impl()->data.data();
        if (needs(a.impl())) {
          std::span<float> g = gbuf(a.impl());
          for (size_t i = 0; i < g.size(); ++i) g[i] += g0 * 2.0f * inv * (pa[i] - pb[i]);
        }
        if (needs(b.impl())) {
          std::span<float> g = gbuf(b.impl());
          for (size_t i = 0; i < g.size(); ++i) g[i] -= g0 * 2.0f * inv * (pa[i] - pb[i]);
        }
      },
      "mse_loss");
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  expect_ndim(logits, 2, "softmax_cross_entropy", "logits");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("softmax_cross_entropy: got " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(n));
  }
  for (int in = 0; in < n; ++in) {
    if (labels[static_cast<size_t>(in)] < 0 || labels[static_cast<size_t>(in)] >= c) {
      throw UsageError("softmax_cross_entropy: label " +
                       std::to_string(labels[static_cast<size_t>(in)]) + " out of range [0," +
                       std::to_string(c) + ") at sample " + std::to_string(in));
    }
  }
  const float* pz = logits.data().data();
  std::vector<float> probs(logits.size());
  double total = 0.0;
  for (int in = 0; in < n; ++in) {
    const float* row = pz + static_cast<size_t>(in) * c;
    float mx = row[0];
    for (int k = 1; k < c; ++k) mx = std::max(mx, row[k]);
    double denom = 0.0;
    for (int k = 0; k < c; ++k) {
      const float e = std::exp(row[k] - mx);
      probs[static_cast<size_t>(in) * c + k] = e;
      denom += e;
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int k = 0; k < c; ++k) probs[static_cast<size_t>(in) * c + k] *= inv;
    total -= static_cast<double>(row[labels[static_cast<size_t>(in)]] - mx) - std::log(denom);
  }
  return make_op_output(
      {1}, {static_cast<float>(total / n)}, {logits},
      [logits, labels, n, c, probs = std::move(probs)](TensorImpl& self) {
        if (!needs(logits.impl())) return;
        std::span<float> g = gbuf(logits.impl());
        const float g0 = self.grad[0] / static_cast<float>(n);
        for (int in = 0; in < n; ++in) {
          for (int k = 0; k < c; ++k) {
            const size_t of = static_cast<size_t>(in) * c + k;
            const float ind = k == labels[static_cast<size_t>(in)] ? 1.0f : 0.0f;
            g[of] += g0 * (probs[of] - ind);
          }
        }
      },
      "softmax_cross_entropy");
}

Tensor dropout(const Tensor& x, float p, Rng& rng, bool training) {
  if (p < 0.0f || p >= 1.0f) {
    throw UsageError("dropout: probability " + std::to_string(p) + " outside [0,1)");
  }
  if (!training || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.size());
  for (size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() >= p ? keep_scale : 0.0f;
  }
  std::vector<float> out(x.size());
  const float* px = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = px[i] * mask[i];
  return make_op_output(
      x.shape(), std::move(out), {x},
      [x, mask = std::move(mask)](TensorImpl& self) {
        if (!needs(x.impl())) return;
        std::span<float> g = gbuf(x.impl());
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
      },
      "dropout");
}

std::vector<int> argmax_rows(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError("argmax_rows: want [N,C], got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  const float* px = x.data().data();
  for (int in = 0; in < n; ++in) {
    const float* row = px + static_cast<size_t>(in) * c;
    int best = 0;
    for (int k = 1; k < c; ++k) {
      if (row[k] > row[best]) best = k;
    }
    out[static_cast<size_t>(in)] = best;
  }
  return out;
}

}  // namespace capslab::ops
