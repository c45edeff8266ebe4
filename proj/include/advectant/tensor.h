#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advectant {

using Shape = std::vector<int64_t>;

/// Thrown when tensor extents do not agree with an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an operation's preconditions are violated (bad inputs,
/// non-scalar loss, statistics over a single element, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

int64_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

template <typename T>
struct TensorNode;

/// Callback that pushes `self.grad` into the grads of `self.parents`.
template <typename T>
using BackwardFn = std::function<void(TensorNode<T>& self)>;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  // Allocated lazily; same length as data once present.
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  BackwardFn<T> backward;

  bool is_leaf() const { return !backward; }
  // Returns grad, zero-filling it on first use.
  std::vector<T>& grad_buffer();
};

/// Dense row-major array with reverse-mode autodiff. Copies share storage,
/// like a handle; use Clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor Zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor Scalar1(T value) { return Tensor(Shape{}, {value}); }
  static Tensor FromList(Shape shape, std::initializer_list<T> values) {
    return Tensor(std::move(shape), std::vector<T>(values));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T item() const;
  T& operator[](int64_t i) { return node_->data[i]; }
  const T& operator[](int64_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value = true);

  bool has_grad() const { return !node_->grad.empty(); }
  // Zeros when no gradient has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy, detached from the graph.
  Tensor Clone() const;
  // Shares nothing with the graph; same values.
  Tensor Detach() const { return Clone(); }

  /// Propagates d(this)/d(leaf) into every leaf that requires grad.
  /// Leaf grads accumulate across calls; interior grads are reset.
  void Backward() const;

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

  /// Builds the output of a differentiable op. Grad tracking is enabled
  /// only when grad mode is on and some parent requires grad.
  static Tensor MakeResult(Shape shape, std::vector<T> data,
                           std::vector<Tensor> parents, BackwardFn<T> fn);

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Returns true while autodiff recording is enabled on this thread.
bool GradEnabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Ordered view of the recorded graph reachable from a root: every node
/// appears after all of its inputs.
template <typename T>
std::vector<TensorNode<T>*> TopologicalOrder(const Tensor<T>& root);

/// Throws ContractError if any value is NaN or infinite.
template <typename T>
void CheckFinite(std::span<const T> values, const char* what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace advectant
