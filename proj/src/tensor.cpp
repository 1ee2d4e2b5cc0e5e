#include "capslab/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace capslab {

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data.assign(static_cast<size_t>(shape_size(t.impl_->shape)), 0.0f);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = zeros(std::move(shape));
  for (float& x : t.impl_->data) x = value;
  return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_size(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_vector: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(float value) { return from_vector({1}, {value}); }

int Tensor::dim(int axis) const {
  if (axis < 0) axis += ndim();
  if (axis < 0 || axis >= ndim()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[static_cast<size_t>(axis)];
}

std::span<float> Tensor::data_mut() {
  if (impl_->backward_fn) {
    throw UsageError("data_mut: tensor is on the tape and immutable");
  }
  return impl_->data;
}

float Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

std::span<const float> Tensor::grad() const {
  if (impl_->grad.empty()) throw UsageError("grad: no gradient recorded; run backward first");
  return impl_->grad;
}

std::span<float> Tensor::grad_mut() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

Tensor Tensor::clone() const { return detach(); }

Tensor make_op_output(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                      std::function<void(TensorImpl&)> backward_fn, const char* op_name) {
  Tensor out = Tensor::from_vector(std::move(shape), std::move(data));
  bool taped = false;
  for (const Tensor& p : parents) {
    if (p.requires_grad()) taped = true;
  }
  if (taped) {
    out.impl()->requires_grad = true;
    out.impl()->backward_fn = std::move(backward_fn);
    for (Tensor& p : parents) {
      if (p.defined()) out.impl()->parents.push_back(p.impl());
    }
  }
  debug_check_finite(out, op_name);
  return out;
}

void accumulate_grad(TensorImpl& t, std::span<const float> values) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0f);
  float* g = t.grad.data();
  const float* v = values.data();
  const size_t n = t.grad.size();
  for (size_t i = 0; i < n; ++i) g[i] += v[i];
}

void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.requires_grad()) {
    throw UsageError("backward: tensor is not on the tape");
  }
  if (loss.size() != 1) {
    throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }

  // Iterative post-order DFS; topo holds children after all their parents'
  // positions are fixed, so reverse iteration is a valid backward order.
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.impl().get(), 0});
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.impl()->grad.assign(1, 1.0f);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }

  // Clear the tape: edges everywhere, grads on intermediates. Leaves keep
  // their grads for the optimizer.
  for (TensorImpl* node : topo) {
    if (node->backward_fn) node->grad.clear();
    node->backward_fn = nullptr;
    node->parents.clear();
  }
}

namespace {
#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif
}  // namespace

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }

void debug_check_finite(const Tensor& t, const char* op_name) {
  if (!g_finite_checks) return;
  for (float x : t.data()) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op_name);
    }
  }
}

}  // namespace capslab
