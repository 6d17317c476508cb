#include <algorithm>

#include "comet/autodiff.hpp"

namespace comet::ad {

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ContractError("Graph: invalid variable handle");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ContractError("Graph: invalid variable handle");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::leaf(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.kind = Kind::Leaf;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::param(ParamStore<T>& store, const std::string& name) {
  if (auto it = params_.find(name); it != params_.end()) return Var{it->second};
  auto& e = store.entry(name);
  Node n;
  n.value = e.value;
  if (!e.buffer && e.trainable) {
    n.kind = Kind::Param;
    n.requires_grad = true;
    if (e.grad.shape() != e.value.shape()) e.grad = Tensor<T>(e.value.shape());
    n.store_grad = &e.grad;
  }
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  params_.emplace(name, id);
  return Var{id};
}

template <typename T>
Var Graph<T>::record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.kind = Kind::Op;
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](Var v) { return v.valid() && node(v).requires_grad; });
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var root) {
  Node& r = node(root);
  if (r.value.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_str(r.value.shape()));
  }
  for (auto& n : nodes_) {
    if (n.kind != Kind::Leaf) n.grad = Tensor<T>();
  }
  if (!r.requires_grad) return;
  Tensor<T>& seed = grad_buffer(root);
  seed[0] += T{1};
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.kind == Kind::Op) {
      // The callback may grow other nodes' buffers but never this node's.
      n.backward(*this, n.grad);
    } else if (n.kind == Kind::Param) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*n.store_grad)[i] += n.grad[i];
    }
  }
}

template <typename T>
void Graph<T>::zero_leaf_grads() {
  for (auto& n : nodes_) {
    if (n.kind == Kind::Leaf) n.grad = Tensor<T>();
  }
}

template class Graph<float>;
template class Graph<double>;
template class Graph<long double>;

}  // namespace comet::ad
