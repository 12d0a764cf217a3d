#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "odis/tensor.hpp"

namespace odis {

/// Handle to a node on a Graph. Only meaningful for the graph that issued it.
struct Var {
  std::uint32_t graph = 0;
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Gradient tape. Every primitive appends one node holding its value and a
/// closure that maps the node's output gradient onto its inputs. A graph is
/// owned by one training step and is not thread-safe.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  /// With `track_gradients == false` no closures are stored and parameters
  /// are recorded as constants (teacher and evaluation passes).
  explicit Graph(bool track_gradients = true);

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return tracking_; }

  Var constant(Tensor<T> value);
  Var parameter(std::string name, Tensor<T> value);

  /// Append a primitive. `backward` may be empty for non-differentiable ops.
  Var record(std::string_view op, Tensor<T> value, std::vector<Var> inputs,
             Backward backward);

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::string_view op_name(Var v) const { return node(v).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of `v` during backward; null when `v` needs no gradient.
  Tensor<T>* grad_buffer(Var v);

  /// Reverse-mode sweep from a scalar loss. Returns one entry per parameter
  /// on the tape, zero-filled when the parameter did not reach the loss.
  Gradients<T> backward(Var loss);

  /// Op names of the nodes whose adjoints ran during the last backward, in
  /// the order they ran.
  const std::vector<std::string_view>& last_backward_order() const {
    return backward_order_;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    std::vector<std::uint32_t> inputs;
    Backward backward;
    std::string_view op;
    std::string param_name;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::uint32_t serial_;
  bool tracking_;
  std::vector<Node> nodes_;
  std::vector<std::string_view> backward_order_;
};

/// Differentiable primitives. Every op works on rank-2 values; row vectors
/// are [1 x n] and scalars are [1 x 1].
namespace ops {

template <typename T> Var matmul(Graph<T>& g, Var a, Var b);
/// x[n x in] * w[in x out] + bias[1 x out]; `bias` may be invalid.
template <typename T> Var linear(Graph<T>& g, Var x, Var w, Var bias);
template <typename T> Var add(Graph<T>& g, Var a, Var b);
template <typename T> Var scale(Graph<T>& g, Var a, T factor);
template <typename T> Var gelu(Graph<T>& g, Var x);
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-6));
/// Row-wise softmax of x / temperature.
template <typename T> Var softmax(Graph<T>& g, Var x, T temperature);
/// Row-wise x / max(||x||, eps).
template <typename T>
Var l2_normalize(Graph<T>& g, Var x, T eps = T(1e-12));
/// Per-row -sum_k target[r,k] * log(max(probs[r,k], 1e-12)) as [n x 1].
/// Targets are constants: no gradient flows into them.
template <typename T>
Var cross_entropy_rows(Graph<T>& g, const Tensor<T>& targets, Var probs);
template <typename T> Var sum(Graph<T>& g, Var x);
/// sum_i weights[i] * x[i] over all entries of x.
template <typename T>
Var weighted_sum(Graph<T>& g, Var x, std::vector<T> weights);
template <typename T> Var transpose(Graph<T>& g, Var x);
template <typename T>
Var gather_rows(Graph<T>& g, Var x, std::vector<std::size_t> rows);
template <typename T> Var concat_rows(Graph<T>& g, const std::vector<Var>& xs);

/// Multi-head self-attention over `qkv` = [N x 3D] holding N / seq_len
/// sequences back to back. The query row of token 0 in sequence b only sees
/// keys j with key_mask[b * seq_len + j] != 0; all other query rows see every
/// key. An empty key_mask means no restriction. Returns [N x D] before the
/// output projection. When `probs_out` is set it receives the softmaxed
/// weights as [sequences * heads * seq_len x seq_len].
template <typename T>
Var masked_attention(Graph<T>& g, Var qkv, std::size_t seq_len,
                     std::size_t heads, std::vector<std::uint8_t> key_mask,
                     Tensor<T>* probs_out = nullptr);

/// Builds [count * (1 + P) x D] token sequences from projected patches
/// [count * P x D]: token 0 of each sequence is `obj_token`, patch i is the
/// projection (or `mask_token` where patch_mask is set) plus pos[i].
/// An empty patch_mask leaves every patch unmasked.
template <typename T>
Var assemble_tokens(Graph<T>& g, Var patches, Var obj_token, Var mask_token,
                    Var pos, std::vector<std::uint8_t> patch_mask);

}  // namespace ops

}  // namespace odis
