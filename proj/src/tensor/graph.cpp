#include <atomic>
#include <stdexcept>

#include "odis/autograd.hpp"

namespace odis {

namespace {
std::atomic<std::uint32_t> next_serial{1};
}

template <typename T>
Graph<T>::Graph(bool track_gradients)
    : serial_(next_serial.fetch_add(1)), tracking_(track_gradients) {
  nodes_.reserve(256);
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.graph != serial_ || v.id >= nodes_.size()) {
    throw std::invalid_argument("graph: variable does not belong to this tape");
  }
  return nodes_[v.id];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  return const_cast<Node&>(static_cast<const Graph&>(*this).node(v));
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var{serial_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::parameter(std::string name, Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.op = "parameter";
  n.param_name = std::move(name);
  n.requires_grad = tracking_;
  nodes_.push_back(std::move(n));
  return Var{serial_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::record(std::string_view op, Tensor<T> value,
                     std::vector<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (tracking_) {
    for (Var in : inputs) {
      n.requires_grad = n.requires_grad || node(in).requires_grad;
      n.inputs.push_back(in.id);
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{serial_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>* Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.requires_grad) return nullptr;
  if (!n.grad) n.grad.emplace(n.value.shape(), T(0));
  return &*n.grad;
}

template <typename T>
Gradients<T> Graph<T>::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                shape_str(root.value.shape()));
  }
  if (!tracking_) {
    throw std::logic_error("backward: graph was built without gradients");
  }
  for (Node& n : nodes_) n.grad.reset();
  backward_order_.clear();
  if (root.requires_grad) root.grad.emplace(root.value.shape(), T(1));

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad || !n.backward) continue;
    // The closure may grow other nodes' gradient buffers but never touches
    // this node, so the reference stays valid.
    n.backward(*this, *n.grad);
    backward_order_.push_back(n.op);
  }

  Gradients<T> out;
  for (Node& n : nodes_) {
    if (n.param_name.empty()) continue;
    out.insert_or_assign(n.param_name, n.grad ? std::move(*n.grad)
                                              : Tensor<T>(n.value.shape()));
  }
  return out;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace odis
