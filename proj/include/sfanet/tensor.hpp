#ifndef SFANET_TENSOR_HPP
#define SFANET_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <utility>

#include "sfanet/common.hpp"

namespace sfanet {

template <typename T>
struct TensorData;

// One recorded forward op. Holds shared ownership of its input tensors so the
// saved forward context stays alive until backward; the output is held weakly
// to avoid a reference cycle (the output owns this node).
template <typename T>
struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorData<T>>> inputs;
  std::weak_ptr<TensorData<T>> output;
  // Reads output.grad, accumulates into the grads of inputs that need them.
  std::function<void(const TensorData<T>& out)> backward_fn;
};

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;  // producer op; null for leaves

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Thread-local switch: when disabled, ops run forward-only (no tape).
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  bool prev_;
};

// Dense N-d array, row-major, shared-payload value type. Feature maps use
// N x C x H x W. Copying a Tensor aliases the payload; use clone() to detach.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T value) {
    Tensor t;
    t.impl_ = std::make_shared<TensorData<T>>();
    int64_t n = numel_of(shape);
    SFA_CHECK(n >= 0) << "bad shape " << shape_str(shape);
    for (int64_t e : shape) SFA_CHECK(e > 0) << "non-positive extent in " << shape_str(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<size_t>(n), value);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    Tensor t = zeros(std::move(shape));
    SFA_CHECK(static_cast<int64_t>(values.size()) == t.numel())
        << "value count " << values.size() << " != numel " << t.numel();
    t.impl_->data = std::move(values);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return impl_ ? impl_->numel() : 0; }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }
  T item() const {
    SFA_CHECK(numel() == 1) << "item() on tensor of shape " << shape_str(shape());
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  T* grad() {
    impl_->ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return impl_->grad; }
  void zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  std::shared_ptr<TensorData<T>> impl() const { return impl_; }

  // Deep copy of data only (no grad, no tape linkage).
  Tensor clone() const {
    Tensor t = zeros(shape());
    t.impl_->data = impl_->data;
    return t;
  }

  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorData<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  bool all_finite() const {
    for (T v : impl_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Reverse-mode gradient propagation from a scalar root. Every tape node
  // reachable from this tensor runs exactly once, consumers before producers,
  // so fan-out grads are fully accumulated before being pushed further back.
  void backward() const {
    SFA_CHECK(numel() == 1) << "backward() requires a scalar root, got " << shape_str(shape());
    SFA_CHECK(impl_->node != nullptr) << "backward() on a tensor with no tape";
    impl_->ensure_grad();
    impl_->grad[0] = T(1);

    std::vector<GradNode<T>*> order;
    std::unordered_set<GradNode<T>*> seen;
    // Iterative DFS postorder; reversed postorder = topological order
    // (consumer before producer).
    struct Frame {
      GradNode<T>* node;
      size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_->node.get(), 0});
    seen.insert(impl_->node.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_input < f.node->inputs.size()) {
        GradNode<T>* child = f.node->inputs[f.next_input]->node.get();
        ++f.next_input;
        if (child && !seen.count(child)) {
          seen.insert(child);
          stack.push_back({child, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      GradNode<T>* node = *it;
      auto out = node->output.lock();
      SFA_CHECK(out != nullptr) << "tape output expired for op " << node->op;
      if (out->grad.empty()) continue;  // no gradient flowed into this branch
      node->backward_fn(*out);
    }
  }

 private:
  std::shared_ptr<TensorData<T>> impl_;
};

namespace detail {

template <typename T>
inline bool any_needs_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!GradMode::enabled()) return false;
  for (const Tensor<T>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// Attach a tape node to `out` recording `inputs` as its producers.
template <typename T, typename Fn>
inline void record(const char* op, Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
                   Fn&& backward_fn) {
  auto node = std::make_shared<GradNode<T>>();
  node->op = op;
  for (const Tensor<T>* t : inputs) node->inputs.push_back(t->impl());
  node->output = out.impl();
  node->backward_fn = std::forward<Fn>(backward_fn);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
}

template <typename T>
inline bool wants_grad(const std::shared_ptr<TensorData<T>>& t) {
  return t->requires_grad;
}

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Fills with N(0, std^2) draws from the given engine.
template <typename T>
void fill_normal(Tensor<T>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.vec()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(Tensor<T>& t, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.vec()) v = static_cast<T>(dist(rng));
}

}  // namespace sfanet

#endif
