#include "advectant/tensor.h"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace advectant {

namespace {
thread_local bool grad_enabled = true;
}  // namespace

bool GradEnabled() { return grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }

int64_t NumElements(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <typename T>
std::vector<T>& TensorNode<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) {
  for (int64_t e : shape) {
    if (e <= 0) throw DimensionError("non-positive extent in " + ShapeToString(shape));
  }
  node_ = std::make_shared<TensorNode<T>>();
  node_->data.assign(NumElements(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) {
  for (int64_t e : shape) {
    if (e <= 0) throw DimensionError("non-positive extent in " + ShapeToString(shape));
  }
  if (static_cast<int64_t>(data.size()) != NumElements(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + ShapeToString(shape));
  }
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         ShapeToString(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + ShapeToString(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = value;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::Clone() const {
  Tensor out;
  out.node_ = std::make_shared<TensorNode<T>>();
  out.node_->shape = node_->shape;
  out.node_->data = node_->data;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::MakeResult(Shape shape, std::vector<T> data,
                                std::vector<Tensor> parents, BackwardFn<T> fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!GradEnabled()) return out;
  bool any = false;
  for (const Tensor& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->backward = std::move(fn);
  out.node_->parents.reserve(parents.size());
  for (Tensor& p : parents) out.node_->parents.push_back(std::move(p.node_));
  return out;
}

template <typename T>
std::vector<TensorNode<T>*> TopologicalOrder(const Tensor<T>& root) {
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  // Iterative post-order DFS; graphs from deep advection chains can be long.
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void Tensor<T>::Backward() const {
  if (numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        ShapeToString(shape()));
  }
  if (!requires_grad()) throw ContractError("loss does not depend on any parameter");
  const std::vector<TensorNode<T>*> order = TopologicalOrder(*this);
  for (TensorNode<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (!n->is_leaf()) n->backward(*n);
  }
}

template <typename T>
void CheckFinite(std::span<const T> values, const char* what) {
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ContractError(std::string(what) + ": non-finite value at index " +
                          std::to_string(i));
    }
  }
}

template struct TensorNode<float>;
template struct TensorNode<double>;
template class Tensor<float>;
template class Tensor<double>;
template std::vector<TensorNode<float>*> TopologicalOrder(const Tensor<float>&);
template std::vector<TensorNode<double>*> TopologicalOrder(const Tensor<double>&);
template void CheckFinite<float>(std::span<const float>, const char*);
template void CheckFinite<double>(std::span<const double>, const char*);

}  // namespace advectant
