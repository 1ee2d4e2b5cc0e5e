#pragma once

#include <vector>

#include "capslab/rng.hpp"
#include "capslab/tensor.hpp"

// Differentiable operators. Every op validates shapes up front (throwing
// ShapeError naming the offending axis) and pins its accumulation order so
// repeated runs produce bit-identical results: reductions always walk the
// contracted axis in ascending order and biases are added after the products.
namespace capslab::ops {

// Elementwise; operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Full reductions to a scalar (shape [1]).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Data-preserving layout changes. reshape accepts one -1 axis.
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);

// a[M,K] x b[K,N] -> [M,N]; per-element accumulation ascending in k.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[N,In], w[Out,In], b[Out] -> [N,Out]; products ascending in In, bias last.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Numerically stable softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis);
// Euclidean norm over the last axis: [..., D] -> [...].
Tensor l2_norm(const Tensor& x);

// Valid cross-correlation, no padding. x[N,C,H,W], w[F,C,KH,KW], b[F]
// (pass an undefined Tensor for no bias) -> [N,F,OH,OW]. Accumulation per
// output element ascends (c, kh, kw); bias added last.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

// v = (|s|^2 / (1 + |s|^2)) * s / |s| over the last axis. Zero vectors map
// to zero with zero gradient.
Tensor squash(const Tensor& s);

// u_hat[n,p,j,:] = w[p,j] (Dc x Dp matrix) applied to u[n,p,:].
// w[P,J,Dc,Dp], u[N,P,Dp] -> [N,P,J,Dc].
Tensor capsule_predict(const Tensor& w, const Tensor& u);
// s[n,j,:] = sum_p c[n,p,j] * u_hat[n,p,j,:], ascending p.
// c[N,P,J], u_hat[N,P,J,D] -> [N,J,D].
Tensor route_weighted_sum(const Tensor& c, const Tensor& u_hat);
// Dot product over the trailing axis: u_hat[N,P,J,D], v[N,J,D] -> [N,P,J].
Tensor route_agreement(const Tensor& u_hat, const Tensor& v);

// Zero every row except rows[n] per sample: x[N,J,D] -> [N,J,D].
Tensor mask_rows(const Tensor& x, const std::vector<int>& rows);

// Two-sided margin loss over capsule lengths, mean over the batch:
// L = 1/N sum_n sum_k [ T_k max(0, m_pos - |v_k|)^2
//                       + lambda_neg (1 - T_k) max(0, |v_k| - m_neg)^2 ].
// norms[N,J], labels per sample in [0, J).
Tensor margin_loss(const Tensor& norms, const std::vector<int>& labels, float m_pos, float m_neg,
                   float lambda_neg);

// Mean over all elements of (a - b)^2.
Tensor mse_loss(const Tensor& a, const Tensor& b);

// Mean negative log-likelihood of labels under softmax(logits[N,C]).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Inverted dropout: keeps with probability 1-p and rescales by 1/(1-p).
// Identity when training is false or p == 0.
Tensor dropout(const Tensor& x, float p, Rng& rng, bool training);

// Index of the row-wise maximum of x[N,C] (first maximum wins). Not an op:
// plain data, no tape involvement.
std::vector<int> argmax_rows(const Tensor& x);

}  // namespace capslab::ops
