#ifndef DFN_TENSOR_HPP_
#define DFN_TENSOR_HPP_

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfn/errors.hpp"

namespace dfn {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
class Tensor;

// One node of the reverse-mode differentiation graph. Nodes are created in
// topological order (parents strictly before children) and carry a creation
// stamp; backward() replays reachable nodes once each, in descending stamp
// order. `backprop` reads this node's grad and accumulates (+=) into the
// parents' grads, so gradients of tensors consumed by several ops add up.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched; then same length as value
  bool requires_grad = false;
  std::uint64_t stamp = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

inline std::uint64_t next_node_stamp() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording within a scope (inference mode).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense N-d array with value semantics on the handle (copies share storage).
// Feature maps use [N, C, H, W] row-major layout.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != std::int64_t(data.size()))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    n_ = std::make_shared<TensorNode<T>>();
    n_->shape = std::move(shape);
    n_->value = std::move(data);
    n_->requires_grad = requires_grad;
    n_->stamp = next_node_stamp();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), fill);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }

  const Shape& shape() const { return n_->shape; }
  int rank() const { return int(n_->shape.size()); }
  int dim(int i) const { return n_->shape[std::size_t(i)]; }
  std::int64_t numel() const { return std::int64_t(n_->value.size()); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  T* ptr() { return n_->value.data(); }
  const T* ptr() const { return n_->value.data(); }

  T item() const {
    if (numel() != 1)
      throw UsageError("item() requires a single-element tensor, shape is " +
                       shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool r) {
    n_->requires_grad = r;
    return *this;
  }

  bool grad_defined() const { return !n_->grad.empty(); }

  // Materializes a zero gradient on first access.
  std::vector<T>& grad() { return n_->ensure_grad(); }
  const std::vector<T>& grad() const {
    return const_cast<TensorNode<T>*>(n_.get())->ensure_grad();
  }

  // Drops the gradient buffer entirely (it re-materializes as zeros).
  void clear_grad() { n_->grad.clear(); }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

  // Detached copy of the values, outside any graph.
  Tensor detached_clone() const { return Tensor(n_->shape, n_->value, false); }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Records an op result in the graph. If grad mode is off or no parent needs
// gradients, the node is a plain constant and the closure is dropped.
template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> value,
                         std::vector<Tensor<T>> parents,
                         std::function<void(TensorNode<T>&)> backprop) {
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) needs = true;
  Tensor<T> out(std::move(shape), std::move(value), needs);
  if (needs) {
    auto node = out.node();
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
  }
  return out;
}

// Reverse pass from a scalar loss. Every reachable node's closure runs exactly
// once; nodes whose gradient was never touched are skipped (their grad is
// identically zero). Gradients accumulate additively into leaves, so running
// backward twice without clearing doubles them.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw UsageError("backward requires a scalar loss, shape is " +
                     shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<TensorNode<T>*> order;
  std::vector<TensorNode<T>*> stack{loss.node().get()};
  std::vector<const TensorNode<T>*> seen;
  auto mark = [&seen](const TensorNode<T>* n) {
    auto it = std::lower_bound(seen.begin(), seen.end(), n);
    if (it != seen.end() && *it == n) return false;
    seen.insert(it, n);
    return true;
  };
  mark(loss.node().get());
  while (!stack.empty()) {
    TensorNode<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && mark(p.get())) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) {
              return a->stamp > b->stamp;
            });

  loss.node()->ensure_grad()[0] += T(1);
  for (TensorNode<T>* n : order)
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
}

}  // namespace dfn

#endif  // DFN_TENSOR_HPP_
