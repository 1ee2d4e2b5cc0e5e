#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "capslab/filters.hpp"
#include "capslab/ops.hpp"
#include "capslab/rng.hpp"
#include "capslab/tensor.hpp"
#include "doctest.h"
#include "support/gradcheck.hpp"

using namespace capslab;
using testsup::grad_check;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                   bool requires_grad = false) {
  std::vector<float> v(static_cast<size_t>(shape_size(shape)));
  for (float& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

// Definition-following convolution: one accumulator per output element,
// walking (c, kh, kw) in ascending order, bias added last.
Tensor conv2d_naive(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), iw = x.dim(3);
  const int f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = (h - kh) / stride + 1, ow = (iw - kw) / stride + 1;
  std::vector<float> out(static_cast<size_t>(n) * f * oh * ow);
  const float* px = x.data().data();
  const float* pw = w.data().data();
  size_t o = 0;
  for (int in = 0; in < n; ++in) {
    for (int jf = 0; jf < f; ++jf) {
      for (int io = 0; io < oh; ++io) {
        for (int jo = 0; jo < ow; ++jo) {
          float acc = 0.0f;
          for (int ic = 0; ic < c; ++ic) {
            for (int ikh = 0; ikh < kh; ++ikh) {
              for (int ikw = 0; ikw < kw; ++ikw) {
                const float xv = px[((static_cast<size_t>(in) * c + ic) * h + io * stride + ikh) * iw +
                                    jo * stride + ikw];
                const float wv = pw[((static_cast<size_t>(jf) * c + ic) * kh + ikh) * kw + ikw];
                acc += xv * wv;
              }
            }
          }
          if (b.defined()) acc += b.data()[static_cast<size_t>(jf)];
          out[o++] = acc;
        }
      }
    }
  }
  return Tensor::from_vector({n, f, oh, ow}, std::move(out));
}

// Sort-based 3x3 median with explicit edge-replicated padding.
Tensor median_naive(const Tensor& x) {
  const int h = x.dim(0), w = x.dim(1);
  std::vector<float> padded(static_cast<size_t>(h + 2) * (w + 2));
  for (int i = -1; i <= h; ++i) {
    for (int j = -1; j <= w; ++j) {
      const int ii = std::clamp(i, 0, h - 1), jj = std::clamp(j, 0, w - 1);
      padded[static_cast<size_t>(i + 1) * (w + 2) + (j + 1)] =
          x.data()[static_cast<size_t>(ii) * w + jj];
    }
  }
  std::vector<float> out(static_cast<size_t>(h) * w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      std::vector<float> win;
      for (int di = 0; di <= 2; ++di)
        for (int dj = 0; dj <= 2; ++dj)
          win.push_back(padded[static_cast<size_t>(i + di) * (w + 2) + (j + dj)]);
      std::sort(win.begin(), win.end());
      out[static_cast<size_t>(i) * w + j] = win[4];
    }
  }
  return Tensor::from_vector({h, w}, std::move(out));
}

bool exactly_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.size(); ++i) {
    if (a.data()[static_cast<size_t>(i)] != b.data()[static_cast<size_t>(i)]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("tensor basics and validation") {
  CHECK_THROWS_AS(Tensor::from_vector({2, 3}, {1.0f, 2.0f}), ShapeError);
  Tensor t = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(Tensor::scalar(3.5f).item() == 3.5f);
  CHECK(t.dim(-1) == 2);
  CHECK_THROWS_AS(t.dim(2), ShapeError);
  CHECK(shape_size({2, 3, 4}) == 24);
}

TEST_CASE("tape: accumulation, reuse, lifecycle") {
  Tensor x = Tensor::from_vector({3}, {1, 2, 3}, true);

  SUBCASE("same tensor used twice accumulates") {
    Tensor loss = ops::sum(ops::add(x, x));
    backward(loss);
    for (float g : x.grad()) CHECK(g == 2.0f);
  }
  SUBCASE("diamond graph") {
    Tensor c = Tensor::from_vector({3}, {1, 1, 1});
    Tensor u = ops::add(x, c);
    Tensor loss = ops::sum(ops::mul(u, u));  // d/dx (x+1)^2 = 2(x+1)
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0f));
    CHECK(x.grad()[2] == doctest::Approx(8.0f));
  }
  SUBCASE("intermediates are released, leaves keep grads") {
    Tensor y = ops::scale(x, 2.0f);
    Tensor loss = ops::sum(y);
    backward(loss);
    CHECK(x.has_grad());
    CHECK(!y.has_grad());
    CHECK(y.impl()->parents.empty());
  }
  SUBCASE("grads accumulate across backward calls until zero_grad") {
    backward(ops::sum(x));
    backward(ops::sum(x));
    CHECK(x.grad()[0] == 2.0f);
    x.zero_grad();
    CHECK(!x.has_grad());
  }
  SUBCASE("backward validates its input") {
    Tensor plain = Tensor::from_vector({1}, {1.0f});
    CHECK_THROWS_AS(backward(plain), UsageError);
    CHECK_THROWS_AS(backward(ops::scale(x, 1.0f)), UsageError);  // not scalar
  }
  SUBCASE("op outputs are immutable, leaves are not") {
    Tensor y = ops::scale(x, 1.0f);
    CHECK_THROWS_AS(y.data_mut(), UsageError);
    CHECK(x.data_mut().size() == 3);
  }
  SUBCASE("no grad is recorded without requires_grad") {
    Tensor frozen = Tensor::from_vector({3}, {1, 2, 3});
    Tensor loss = ops::sum(ops::mul(frozen, x));
    backward(loss);
    CHECK(!frozen.has_grad());
    CHECK(x.grad()[1] == 2.0f);
  }
}

TEST_CASE("elementwise ops") {
  Tensor a = Tensor::from_vector({4}, {1, -2, 3, 0}, true);
  Tensor b = Tensor::from_vector({4}, {5, 6, -7, 8}, true);

  CHECK(ops::add(a, b).data()[2] == -4.0f);
  CHECK(ops::sub(a, b).data()[0] == -4.0f);
  CHECK(ops::mul(a, b).data()[1] == -12.0f);
  CHECK(ops::scale(a, -2.0f).data()[2] == -6.0f);
  CHECK_THROWS_AS(ops::add(a, Tensor::from_vector({2}, {1, 2})), ShapeError);

  Tensor r = ops::relu(a);
  CHECK(r.data()[0] == 1.0f);
  CHECK(r.data()[1] == 0.0f);

  Tensor s = ops::sigmoid(Tensor::from_vector({3}, {0.0f, 100.0f, -100.0f}));
  CHECK(s.data()[0] == doctest::Approx(0.5));
  CHECK(s.data()[1] == doctest::Approx(1.0));
  CHECK(s.data()[2] == doctest::Approx(0.0));

  backward(ops::sum(ops::mul(a, b)));
  CHECK(a.grad()[0] == 5.0f);  // d/da (a*b) = b
  CHECK(b.grad()[3] == 0.0f);  // = a
}

TEST_CASE("reductions") {
  Tensor x = Tensor::from_vector({2, 2}, {1, 2, 3, 4}, true);
  CHECK(ops::sum(x).item() == 10.0f);
  CHECK(ops::mean(x).item() == 2.5f);
  backward(ops::mean(x));
  for (float g : x.grad()) CHECK(g == doctest::Approx(0.25f));
}

TEST_CASE("reshape and permute") {
  Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true);

  Tensor r = ops::reshape(x, {3, -1});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.data()[3] == 4.0f);  // row-major order preserved
  CHECK_THROWS_AS(ops::reshape(x, {4, -1}), ShapeError);
  CHECK_THROWS_AS(ops::reshape(x, {-1, -1}), ShapeError);
  CHECK_THROWS_AS(ops::reshape(x, {7}), ShapeError);

  Tensor t = ops::permute(x, {1, 0});
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.data()[0] == 1.0f);
  CHECK(t.data()[1] == 4.0f);
  CHECK(t.data()[2] == 2.0f);
  CHECK_THROWS_AS(ops::permute(x, {0, 0}), ShapeError);

  Rng rng(7);
  Tensor big = rand_tensor({2, 3, 4, 5}, rng);
  Tensor round = ops::permute(ops::permute(big, {2, 0, 3, 1}), {1, 3, 0, 2});
  CHECK(exactly_equal(big, round));

  backward(ops::sum(ops::mul(t, t)));
  CHECK(x.grad()[1] == doctest::Approx(4.0f));  // 2*x through the transpose
}

TEST_CASE("matmul and linear match one-accumulator references") {
  Rng rng(11);
  Tensor a = rand_tensor({5, 7}, rng);
  Tensor b = rand_tensor({7, 4}, rng);
  Tensor out = ops::matmul(a, b);
  // Reference: plain dot product per element, k ascending.
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 4; ++j) {
      float acc = 0.0f;
      for (int k = 0; k < 7; ++k) {
        acc += a.data()[static_cast<size_t>(i) * 7 + k] * b.data()[static_cast<size_t>(k) * 4 + j];
      }
      CHECK(out.data()[static_cast<size_t>(i) * 4 + j] == acc);
    }
  }
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);

  Tensor x = rand_tensor({3, 6}, rng);
  Tensor w = rand_tensor({2, 6}, rng);
  Tensor bias = rand_tensor({2}, rng);
  Tensor y = ops::linear(x, w, bias);
  for (int s = 0; s < 3; ++s) {
    for (int o = 0; o < 2; ++o) {
      float acc = 0.0f;
      for (int i = 0; i < 6; ++i) {
        acc += x.data()[static_cast<size_t>(s) * 6 + i] * w.data()[static_cast<size_t>(o) * 6 + i];
      }
      acc += bias.data()[static_cast<size_t>(o)];
      CHECK(y.data()[static_cast<size_t>(s) * 2 + o] == acc);
    }
  }
}

TEST_CASE("conv2d is bit-identical to the definition") {
  Rng rng(13);
  struct Case {
    Shape x, w;
    int stride;
    bool bias;
  };
  const Case cases[] = {
      {{1, 1, 6, 6}, {2, 1, 3, 3}, 1, true},
      {{2, 3, 9, 9}, {4, 3, 3, 3}, 2, true},
      {{1, 2, 12, 10}, {3, 2, 5, 5}, 1, false},
      {{2, 1, 28, 28}, {8, 1, 9, 9}, 1, true},
      {{1, 8, 20, 20}, {16, 8, 9, 9}, 2, true},
  };
  for (const Case& c : cases) {
    CAPTURE(shape_str(c.x));
    Tensor x = rand_tensor(c.x, rng);
    Tensor w = rand_tensor(c.w, rng, -0.5f, 0.5f);
    Tensor b = c.bias ? rand_tensor({c.w[0]}, rng) : Tensor{};
    Tensor got = ops::conv2d(x, w, b, c.stride);
    Tensor want = conv2d_naive(x, w, b, c.stride);
    CHECK(exactly_equal(got, want));
  }

  Tensor x = rand_tensor({1, 2, 5, 5}, rng);
  CHECK_THROWS_AS(ops::conv2d(x, rand_tensor({2, 3, 3, 3}, rng), Tensor{}, 1), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, rand_tensor({2, 2, 7, 7}, rng), Tensor{}, 1), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, rand_tensor({2, 2, 3, 3}, rng), Tensor{}, 0), UsageError);
  CHECK_THROWS_AS(ops::conv2d(x, rand_tensor({2, 2, 3, 3}, rng), rand_tensor({3}, rng), 1),
                  ShapeError);
}

TEST_CASE("softmax") {
  Tensor flat = ops::softmax(Tensor::from_vector({1, 4}, {0, 0, 0, 0}), 1);
  for (float v : flat.data()) CHECK(v == doctest::Approx(0.25));

  // Shift invariance and ordering.
  Tensor z = Tensor::from_vector({1, 3}, {1, 2, 3});
  Tensor zs = Tensor::from_vector({1, 3}, {1001, 1002, 1003});
  Tensor p1 = ops::softmax(z, 1), p2 = ops::softmax(zs, 1);
  for (int i = 0; i < 3; ++i) {
    CHECK(p1.data()[static_cast<size_t>(i)] ==
          doctest::Approx(p2.data()[static_cast<size_t>(i)]).epsilon(1e-6));
  }
  CHECK(p1.data()[2] > p1.data()[1]);

  // Rows sum to one along the requested axis, wherever it sits.
  Rng rng(17);
  Tensor x = rand_tensor({2, 3, 4}, rng, -5.0f, 5.0f);
  for (int axis : {0, 1, 2, -1}) {
    Tensor p = ops::softmax(x, axis);
    const int ax = axis < 0 ? 2 : axis;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= x.shape()[static_cast<size_t>(i)];
    for (int i = ax + 1; i < 3; ++i) inner *= x.shape()[static_cast<size_t>(i)];
    const int lane = x.shape()[static_cast<size_t>(ax)];
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        double s = 0.0;
        for (int c = 0; c < lane; ++c) {
          s += p.data()[static_cast<size_t>(o * lane * inner + c * inner + in)];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
      }
    }
  }
  CHECK_THROWS_AS(ops::softmax(x, 3), ShapeError);
}

TEST_CASE("l2_norm and squash") {
  Tensor v = Tensor::from_vector({1, 2}, {3, 4});
  CHECK(ops::l2_norm(v).item() == doctest::Approx(5.0));

  // |squash(s)| = |s|^2 / (1 + |s|^2): for |s|=5 that is 25/26.
  Tensor sq = ops::squash(v);
  CHECK(ops::l2_norm(sq).item() == doctest::Approx(25.0 / 26.0));
  CHECK(sq.data()[0] == doctest::Approx(3.0 * 5.0 / 26.0));

  // Long vectors approach unit length, short ones vanish quadratically.
  Tensor longv = ops::squash(Tensor::from_vector({1, 2}, {300, 400}));
  CHECK(ops::l2_norm(longv).item() == doctest::Approx(1.0).epsilon(1e-4));
  Tensor shortv = ops::squash(Tensor::from_vector({1, 2}, {3e-3f, 4e-3f}));
  CHECK(ops::l2_norm(shortv).item() == doctest::Approx(25e-6).epsilon(1e-3));

  // Zero vector: zero output, zero gradient, no NaN even with checks on.
  set_finite_checks(true);
  Tensor z = Tensor::from_vector({2, 3}, {0, 0, 0, 1, 2, 2}, true);
  Tensor out = ops::squash(z);
  for (int i = 0; i < 3; ++i) CHECK(out.data()[static_cast<size_t>(i)] == 0.0f);
  backward(ops::sum(ops::l2_norm(ops::squash(z))));
  CHECK(z.grad()[0] == 0.0f);
  CHECK(z.grad()[3] != 0.0f);
  set_finite_checks(false);
}

TEST_CASE("capsule plumbing ops") {
  Rng rng(23);
  const int n = 2, p = 4, j = 3, dc = 5, dp = 2;
  Tensor w = rand_tensor({p, j, dc, dp}, rng);
  Tensor u = rand_tensor({n, p, dp}, rng);
  Tensor uhat = ops::capsule_predict(w, u);
  CHECK(uhat.shape() == Shape{n, p, j, dc});
  // One element against the matrix-vector definition.
  {
    const int in = 1, ip = 2, ij = 1, ic = 3;
    float acc = 0.0f;
    for (int id = 0; id < dp; ++id) {
      acc += w.data()[((static_cast<size_t>(ip) * j + ij) * dc + ic) * dp + id] *
             u.data()[(static_cast<size_t>(in) * p + ip) * dp + id];
    }
    CHECK(uhat.data()[((static_cast<size_t>(in) * p + ip) * j + ij) * dc + ic] == acc);
  }

  Tensor c = rand_tensor({n, p, j}, rng, 0.0f, 1.0f);
  Tensor s = ops::route_weighted_sum(c, uhat);
  CHECK(s.shape() == Shape{n, j, dc});
  {
    const int in = 0, ij = 2, ic = 1;
    float acc = 0.0f;
    for (int ip = 0; ip < p; ++ip) {
      acc += c.data()[(static_cast<size_t>(in) * p + ip) * j + ij] *
             uhat.data()[((static_cast<size_t>(in) * p + ip) * j + ij) * dc + ic];
    }
    CHECK(s.data()[(static_cast<size_t>(in) * j + ij) * dc + ic] == acc);
  }

  Tensor v = rand_tensor({n, j, dc}, rng);
  Tensor agree = ops::route_agreement(uhat, v);
  CHECK(agree.shape() == Shape{n, p, j});
  {
    const int in = 1, ip = 0, ij = 0;
    float acc = 0.0f;
    for (int ic = 0; ic < dc; ++ic) {
      acc += uhat.data()[((static_cast<size_t>(in) * p + ip) * j + ij) * dc + ic] *
             v.data()[(static_cast<size_t>(in) * j + ij) * dc + ic];
    }
    CHECK(agree.data()[(static_cast<size_t>(in) * p + ip) * j + ij] == acc);
  }

  CHECK_THROWS_AS(ops::capsule_predict(w, rand_tensor({n, p + 1, dp}, rng)), ShapeError);
  CHECK_THROWS_AS(ops::route_weighted_sum(rand_tensor({n, p, j + 1}, rng), uhat), ShapeError);
  CHECK_THROWS_AS(ops::route_agreement(uhat, rand_tensor({n, j, dc + 1}, rng)), ShapeError);
}

TEST_CASE("mask_rows keeps exactly one capsule row per sample") {
  Rng rng(29);
  Tensor x = rand_tensor({2, 4, 3}, rng, 0.5f, 1.0f, true);
  Tensor m = ops::mask_rows(x, {1, 3});
  for (int in = 0; in < 2; ++in) {
    for (int ij = 0; ij < 4; ++ij) {
      for (int ic = 0; ic < 3; ++ic) {
        const size_t of = (static_cast<size_t>(in) * 4 + ij) * 3 + ic;
        const bool kept = (in == 0 && ij == 1) || (in == 1 && ij == 3);
        if (kept) {
          CHECK(m.data()[of] == x.data()[of]);
        } else {
          CHECK(m.data()[of] == 0.0f);
        }
      }
    }
  }
  backward(ops::sum(m));
  int nonzero = 0;
  for (float g : x.grad()) nonzero += g != 0.0f;
  CHECK(nonzero == 6);
  CHECK_THROWS_AS(ops::mask_rows(x, {1}), ShapeError);
  CHECK_THROWS_AS(ops::mask_rows(x, {1, 4}), UsageError);
}

TEST_CASE("margin loss hand-computed cases") {
  // Perfect prediction: correct capsule at 0.9, others at 0.1 -> zero loss.
  Tensor perfect = Tensor::from_vector({1, 3}, {0.9f, 0.1f, 0.1f});
  CHECK(ops::margin_loss(perfect, {0}, 0.9f, 0.1f, 0.5f).item() == doctest::Approx(0.0));

  // Correct capsule at 0.5: (0.9-0.5)^2 = 0.16.
  Tensor low = Tensor::from_vector({1, 3}, {0.5f, 0.1f, 0.1f});
  CHECK(ops::margin_loss(low, {0}, 0.9f, 0.1f, 0.5f).item() == doctest::Approx(0.16));

  // Wrong capsule at 0.2: 0.5*(0.2-0.1)^2 = 0.005.
  Tensor wrong = Tensor::from_vector({1, 3}, {0.9f, 0.2f, 0.1f});
  CHECK(ops::margin_loss(wrong, {0}, 0.9f, 0.1f, 0.5f).item() == doctest::Approx(0.005));

  // Batch mean: the two samples above average to (0.16 + 0.005)/2.
  Tensor batch = Tensor::from_vector({2, 3}, {0.5f, 0.1f, 0.1f, 0.9f, 0.2f, 0.1f});
  CHECK(ops::margin_loss(batch, {0, 0}, 0.9f, 0.1f, 0.5f).item() == doctest::Approx(0.0825));

  CHECK_THROWS_AS(ops::margin_loss(batch, {0}, 0.9f, 0.1f, 0.5f), ShapeError);
  CHECK_THROWS_AS(ops::margin_loss(batch, {0, 3}, 0.9f, 0.1f, 0.5f), UsageError);
}

TEST_CASE("mse and cross-entropy") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_vector({2, 2}, {1, 0, 3, 8});
  CHECK(ops::mse_loss(a, b).item() == doctest::Approx(5.0));  // (0+4+0+16)/4

  // Uniform logits: loss = log(C).
  Tensor z = Tensor::from_vector({2, 4}, std::vector<float>(8, 0.3f), true);
  CHECK(ops::softmax_cross_entropy(z, {1, 2}).item() == doctest::Approx(std::log(4.0)));
  backward(ops::softmax_cross_entropy(z, {1, 2}));
  CHECK(z.grad()[1] == doctest::Approx((0.25 - 1.0) / 2.0));
  CHECK(z.grad()[0] == doctest::Approx(0.25 / 2.0));
  CHECK_THROWS_AS(ops::softmax_cross_entropy(z, {1, 4}), UsageError);
}

TEST_CASE("dropout") {
  Rng rng(31);
  Tensor x = Tensor::from_vector({1, 1000}, std::vector<float>(1000, 1.0f), true);

  Tensor off = ops::dropout(x, 0.5f, rng, false);
  CHECK(exactly_equal(off, x));
  Tensor zero_p = ops::dropout(x, 0.0f, rng, true);
  CHECK(exactly_equal(zero_p, x));

  Tensor on = ops::dropout(x, 0.4f, rng, true);
  int kept = 0;
  for (float v : on.data()) {
    CHECK((v == 0.0f || v == doctest::Approx(1.0f / 0.6f)));
    kept += v != 0.0f;
  }
  CHECK(kept > 520);
  CHECK(kept < 680);

  // Same seed, same mask.
  Rng r1(77), r2(77);
  CHECK(exactly_equal(ops::dropout(x, 0.3f, r1, true), ops::dropout(x, 0.3f, r2, true)));
  CHECK_THROWS_AS(ops::dropout(x, 1.0f, rng, true), UsageError);
}

TEST_CASE("median filter") {
  Rng rng(37);
  // Constant image is a fixed point.
  Tensor flat = Tensor::full({5, 7}, 0.42f);
  CHECK(exactly_equal(median_filter3x3(flat), flat));

  // An isolated spike is removed.
  Tensor spike = Tensor::zeros({7, 7});
  spike.data_mut()[3 * 7 + 3] = 1.0f;
  Tensor cleaned = median_filter3x3(spike);
  for (float v : cleaned.data()) CHECK(v == 0.0f);

  // Random images match the sort-based reference, including the borders.
  for (int t = 0; t < 5; ++t) {
    Tensor img = rand_tensor({9, 11}, rng, 0.0f, 1.0f);
    CHECK(exactly_equal(median_filter3x3(img), median_naive(img)));
  }

  // Batched input filters each plane independently.
  Tensor two = rand_tensor({2, 1, 6, 6}, rng, 0.0f, 1.0f);
  Tensor both = median_filter3x3(two);
  Tensor first = median_filter3x3(ops::reshape(two, {2, 6, 6}));
  CHECK(exactly_equal(ops::reshape(both, {2, 6, 6}), first));
  CHECK_THROWS_AS(median_filter3x3(Tensor::from_vector({3}, {1, 2, 3})), ShapeError);
}

TEST_CASE("finite-difference gradients for every op") {
  Rng rng(41);

  SUBCASE("conv2d") {
    Tensor x = rand_tensor({2, 2, 6, 6}, rng, -1, 1, true);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng, -0.5f, 0.5f, true);
    Tensor b = rand_tensor({3}, rng, -0.5f, 0.5f, true);
    Tensor proj = rand_tensor({2, 3, 2, 2}, rng);
    auto fn = [&] { return ops::sum(ops::mul(ops::conv2d(x, w, b, 2), proj)); };
    auto r = grad_check({x, w, b}, fn);
    CHECK(r.max_rel < 2e-3);
  }
  SUBCASE("matmul and linear") {
    Tensor a = rand_tensor({3, 4}, rng, -1, 1, true);
    Tensor b = rand_tensor({4, 2}, rng, -1, 1, true);
    Tensor proj = rand_tensor({3, 2}, rng);
    auto r = grad_check({a, b}, [&] { return ops::sum(ops::mul(ops::matmul(a, b), proj)); });
    CHECK(r.max_rel < 2e-3);

    Tensor x = rand_tensor({3, 5}, rng, -1, 1, true);
    Tensor w = rand_tensor({4, 5}, rng, -1, 1, true);
    Tensor bias = rand_tensor({4}, rng, -1, 1, true);
    Tensor proj2 = rand_tensor({3, 4}, rng);
    auto r2 =
        grad_check({x, w, bias}, [&] { return ops::sum(ops::mul(ops::linear(x, w, bias), proj2)); });
    CHECK(r2.max_rel < 2e-3);
  }
  SUBCASE("activations and shape ops") {
    Tensor x = Tensor::from_vector({2, 3}, {0.9f, -1.2f, 2.0f, 0.4f, -0.6f, 1.5f}, true);
    Tensor proj = rand_tensor({2, 3}, rng);
    auto r = grad_check({x}, [&] { return ops::sum(ops::mul(ops::relu(x), proj)); });
    CHECK(r.max_rel < 2e-3);
    auto r2 = grad_check({x}, [&] { return ops::sum(ops::mul(ops::sigmoid(x), proj)); });
    CHECK(r2.max_rel < 2e-3);
    Tensor proj3 = rand_tensor({3, 2}, rng);
    auto r3 = grad_check(
        {x}, [&] { return ops::sum(ops::mul(ops::permute(ops::scale(x, 1.5f), {1, 0}), proj3)); });
    CHECK(r3.max_rel < 2e-3);
  }
  SUBCASE("softmax") {
    Tensor x = rand_tensor({2, 5}, rng, -2, 2, true);
    Tensor proj = rand_tensor({2, 5}, rng);
    auto r = grad_check({x}, [&] { return ops::sum(ops::mul(ops::softmax(x, 1), proj)); });
    CHECK(r.max_rel < 2e-3);
  }
  SUBCASE("l2_norm and squash") {
    Tensor x = rand_tensor({3, 4}, rng, 0.3f, 1.5f, true);
    Tensor proj = rand_tensor({3}, rng);
    auto r = grad_check({x}, [&] { return ops::sum(ops::mul(ops::l2_norm(x), proj)); });
    CHECK(r.max_rel < 2e-3);
    Tensor proj2 = rand_tensor({3, 4}, rng);
    auto r2 = grad_check({x}, [&] { return ops::sum(ops::mul(ops::squash(x), proj2)); });
    CHECK(r2.max_rel < 2e-3);
  }
  SUBCASE("capsule ops") {
    const int n = 2, p = 3, j = 2, dc = 4, dp = 3;
    Tensor w = rand_tensor({p, j, dc, dp}, rng, -1, 1, true);
    Tensor u = rand_tensor({n, p, dp}, rng, -1, 1, true);
    Tensor c = rand_tensor({n, p, j}, rng, 0.1f, 1.0f, true);
    Tensor v = rand_tensor({n, j, dc}, rng, -1, 1, true);
    Tensor proj_uhat = rand_tensor({n, p, j, dc}, rng);
    Tensor proj_s = rand_tensor({n, j, dc}, rng);
    Tensor proj_a = rand_tensor({n, p, j}, rng);

    auto r = grad_check(
        {w, u}, [&] { return ops::sum(ops::mul(ops::capsule_predict(w, u), proj_uhat)); });
    CHECK(r.max_rel < 2e-3);
    auto r2 = grad_check({c, w, u}, [&] {
      return ops::sum(
          ops::mul(ops::route_weighted_sum(c, ops::capsule_predict(w, u)), proj_s));
    });
    CHECK(r2.max_rel < 2e-3);
    auto r3 = grad_check({w, u, v}, [&] {
      return ops::sum(ops::mul(ops::route_agreement(ops::capsule_predict(w, u), v), proj_a));
    });
    CHECK(r3.max_rel < 2e-3);
  }
  SUBCASE("losses") {
    // Values parked away from the hinge kinks at 0.9 and 0.1.
    Tensor norms = Tensor::from_vector({2, 3}, {0.7f, 0.3f, 0.05f, 0.95f, 0.5f, 0.2f}, true);
    auto r = grad_check({norms}, [&] { return ops::margin_loss(norms, {0, 1}, 0.9f, 0.1f, 0.5f); });
    CHECK(r.max_rel < 2e-3);

    Tensor a = rand_tensor({3, 4}, rng, -1, 1, true);
    Tensor b = rand_tensor({3, 4}, rng, -1, 1, true);
    auto r2 = grad_check({a, b}, [&] { return ops::mse_loss(a, b); });
    CHECK(r2.max_rel < 2e-3);

    Tensor z = rand_tensor({3, 5}, rng, -2, 2, true);
    auto r3 = grad_check({z}, [&] { return ops::softmax_cross_entropy(z, {4, 0, 2}); });
    CHECK(r3.max_rel < 2e-3);

    // Composite: margin + weighted reconstruction-style term.
    Tensor recon = rand_tensor({2, 6}, rng, 0.1f, 0.9f, true);
    Tensor target = rand_tensor({2, 6}, rng, 0.0f, 1.0f);
    auto r4 = grad_check({norms, recon}, [&] {
      return ops::add(ops::margin_loss(norms, {0, 1}, 0.9f, 0.1f, 0.5f),
                      ops::scale(ops::mse_loss(recon, target), 0.392f));
    });
    CHECK(r4.max_rel < 2e-3);
  }
  SUBCASE("dropout (frozen mask)") {
    Tensor x = rand_tensor({4, 8}, rng, 0.5f, 1.5f, true);
    Tensor proj = rand_tensor({4, 8}, rng);
    auto r = grad_check({x}, [&] {
      Rng local(1234);
      return ops::sum(ops::mul(ops::dropout(x, 0.3f, local, true), proj));
    });
    CHECK(r.max_rel < 2e-3);
  }
}

TEST_CASE("finite checks name the producing op") {
  set_finite_checks(true);
  Tensor bad = Tensor::from_vector({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  CHECK_THROWS_WITH_AS(ops::scale(bad, 1.0f), "non-finite value produced by scale", NumericError);
  // relu squashes the NaN to zero before the check sees it.
  CHECK_NOTHROW(ops::relu(bad));
  set_finite_checks(false);
  CHECK_NOTHROW(ops::scale(bad, 1.0f));
}
