#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "odis/autograd.hpp"
#include "odis/tensor.hpp"

namespace odis {

struct ViTConfig {
  std::size_t image_side = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 4;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t head_hidden = 256;
  std::size_t head_bottleneck = 64;
  std::size_t head_output_dim = 256;
  double student_temp = 0.1;
  double teacher_temp = 0.04;

  std::size_t grid() const { return image_side / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  /// Throws std::invalid_argument when an invariant does not hold.
  void validate() const;
};

/// Named parameter tensors of one network. Student and teacher share the
/// same name set and shapes.
template <typename T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  std::size_t count() const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }
};

template <typename T>
ModelParams<T> init_params(const ViTConfig& config, std::uint64_t seed);

/// Throws unless both sets have identical names and shapes.
template <typename T>
void require_same_layout(const ModelParams<T>& a, const ModelParams<T>& b);

/// Parameters placed on a tape, either trainable or as constants.
class BoundParams {
 public:
  template <typename T>
  static BoundParams bind(Graph<T>& g, const ModelParams<T>& params,
                          bool trainable);
  Var operator[](const std::string& name) const;

 private:
  std::map<std::string, Var> vars_;
};

/// [C x S x S] image -> [HW x C*p*p] patch rows in row-major patch order.
/// Each row is laid out channel-major, then patch row, then patch column.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch_size);

/// Bilinear (half-pixel centers) resampling matrix that maps a
/// from_grid x from_grid positional table to to_grid x to_grid.
template <typename T>
Tensor<T> position_resample_matrix(std::size_t to_grid, std::size_t from_grid);

/// A batch of equally sized views.
template <typename T>
struct ViewBatch {
  Tensor<T> patches;               // [count * grid^2 x patch_dim]
  std::size_t count = 0;
  std::size_t grid = 0;            // patches per side
  std::vector<std::uint8_t> obj_mask;    // count * grid^2, empty = no restriction
  std::vector<std::uint8_t> block_mask;  // count * grid^2, empty = none masked
};

/// Optional introspection of a forward pass.
template <typename T>
struct ForwardProbe {
  std::vector<Tensor<T>> layer_inputs;  // residual stream entering each layer
  std::vector<Tensor<T>> attention;     // softmaxed weights per layer
};

struct BackboneOutput {
  Var tokens;   // final-normed [count * (1 + HW) x D]
  Var obj;      // token 0 of every sequence, [count x D]
  Var patches;  // patch tokens, [count * HW x D]
  std::size_t count = 0;
  std::size_t seq_len = 0;
};

/// Patch projection + positional encoding + [OBJ] / [PATCH] token placement.
template <typename T>
Var embed(Graph<T>& g, const BoundParams& p, const ViTConfig& config,
          const ViewBatch<T>& batch);

/// Key mask for masked_attention: token 0 always sees itself, and patch j
/// iff obj_mask[j]. Empty obj_mask gives an empty (unrestricted) key mask.
std::vector<std::uint8_t> obj_key_mask(const std::vector<std::uint8_t>& obj_mask,
                                       std::size_t count, std::size_t patches);

/// Attention sub-layer of block `layer`: LN -> qkv -> masked attention ->
/// output projection. Does not include the residual.
template <typename T>
Var attention_sublayer(Graph<T>& g, const BoundParams& p,
                       const ViTConfig& config, std::size_t layer, Var x,
                       std::size_t seq_len,
                       const std::vector<std::uint8_t>& key_mask,
                       Tensor<T>* probs_out = nullptr);

template <typename T>
BackboneOutput backbone_forward(Graph<T>& g, const BoundParams& p,
                                const ViTConfig& config,
                                const ViewBatch<T>& batch,
                                ForwardProbe<T>* probe = nullptr);

/// Shared projection head: 3-layer MLP, L2-normalized bottleneck, then
/// cosine similarity against unit-norm prototype rows. Returns logits [rows x K].
template <typename T>
Var head_logits(Graph<T>& g, const BoundParams& p, Var z);

/// Student path: softmax(logits / temperature).
template <typename T>
Var head_probs(Graph<T>& g, const BoundParams& p, Var z, T temperature);

/// Teacher path on detached logits: softmax((logits - center) / temperature).
template <typename T>
Tensor<T> centered_probs(const Tensor<T>& logits, const Tensor<T>& center,
                         T temperature);

}  // namespace odis
