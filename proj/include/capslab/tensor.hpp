#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capslab/errors.hpp"

namespace capslab {

using Shape = std::vector<int>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl;
class Tensor;

// One node of the reverse-mode tape. backward_fn reads this node's grad and
// accumulates contributions into the parents' grads. The graph is a DAG:
// backward() visits each node exactly once in reverse topological order and
// then clears edges, so a tape is single-use.
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;  // participates in gradient computation
  std::vector<float> grad;     // allocated lazily during backward
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  bool is_leaf() const { return backward_fn == nullptr; }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
};

// Value-semantics handle over a shared buffer. Tensors are immutable once on
// the tape; data_mut() is for construction-time fills only.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value);
  static Tensor from_vector(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const;
  int64_t size() const { return impl_->size(); }

  std::span<const float> data() const { return impl_->data; }
  std::span<float> data_mut();
  float item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const float> grad() const;
  std::span<float> grad_mut();
  void zero_grad();

  // Same data buffer, detached from the tape.
  Tensor detach() const;
  // Deep copy of the data, detached from the tape.
  Tensor clone() const;

  std::shared_ptr<TensorImpl>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Creates an op output. If no parent participates in gradients the node is
// left off the tape entirely, which keeps inference passes allocation-light.
Tensor make_op_output(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                      std::function<void(TensorImpl&)> backward_fn, const char* op_name);

// Allocate-if-needed accumulate of `values` into t.grad.
void accumulate_grad(TensorImpl& t, std::span<const float> values);

// Reverse-mode sweep from a scalar loss. Fills grad on every reachable node
// that requires_grad, then clears the tape (edges and intermediate grads);
// leaf grads survive for the optimizer.
void backward(const Tensor& loss);

// Guard: throws NumericError naming the op if t contains NaN/Inf. Enabled by
// default in debug builds; flip at runtime for release-build diagnostics.
void set_finite_checks(bool on);
bool finite_checks_enabled();
void debug_check_finite(const Tensor& t, const char* op_name);

}  // namespace capslab
