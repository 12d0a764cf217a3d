#include "odis/vit.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "odis/kernels.hpp"

namespace odis {

void ViTConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("vit config: " + what);
  };
  if (patch_size == 0 || image_side == 0 || image_side % patch_size != 0) {
    fail("image_side " + std::to_string(image_side) +
         " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) +
         " is not divisible by heads " + std::to_string(heads));
  }
  if (channels == 0 || mlp_ratio == 0 || head_hidden == 0 ||
      head_bottleneck == 0 || head_output_dim == 0) {
    fail("layer widths must be positive");
  }
  if (!(teacher_temp > 0.0) || !(student_temp > teacher_temp)) {
    fail("temperatures must satisfy student_temp > teacher_temp > 0");
  }
}

template <typename T>
const Tensor<T>& ModelParams<T>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <typename T>
Tensor<T>& ModelParams<T>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <typename T>
std::size_t ModelParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

namespace {

std::string block_name(std::size_t layer, const char* leaf) {
  return "blocks." + std::to_string(layer) + "." + leaf;
}

template <typename T>
Tensor<T> trunc_normal(std::size_t rows, std::size_t cols, double std,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor<T> t = Tensor<T>::matrix(rows, cols);
  for (T& v : t.values()) {
    double x;
    do {
      x = dist(rng);
    } while (std::abs(x) > 2.0 * std);
    v = T(x);
  }
  return t;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.embed_dim;
  const std::size_t hidden = d * config.mlp_ratio;
  ModelParams<T> p;
  auto& t = p.tensors;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out,
                    bool bias = true) {
    t.emplace(name + ".weight", trunc_normal<T>(in, out, 0.02, rng));
    if (bias) t.emplace(name + ".bias", Tensor<T>::matrix(1, out));
  };
  auto norm = [&](const std::string& name) {
    t.emplace(name + ".weight", Tensor<T>::matrix(1, d, T(1)));
    t.emplace(name + ".bias", Tensor<T>::matrix(1, d));
  };

  linear("patch_embed", config.patch_dim(), d);
  t.emplace("pos_embed", trunc_normal<T>(config.num_patches(), d, 0.02, rng));
  t.emplace("obj_token", trunc_normal<T>(1, d, 0.02, rng));
  t.emplace("mask_token", Tensor<T>::matrix(1, d));
  for (std::size_t l = 0; l < config.depth; ++l) {
    norm(block_name(l, "norm1"));
    linear(block_name(l, "attn.qkv"), d, 3 * d);
    linear(block_name(l, "attn.proj"), d, d);
    norm(block_name(l, "norm2"));
    linear(block_name(l, "mlp.fc1"), d, hidden);
    linear(block_name(l, "mlp.fc2"), hidden, d);
  }
  norm("norm");
  linear("head.fc1", d, config.head_hidden);
  linear("head.fc2", config.head_hidden, config.head_hidden);
  linear("head.fc3", config.head_hidden, config.head_bottleneck);
  // Prototypes as rows; normalized in the forward pass.
  t.emplace("head.last.weight",
            trunc_normal<T>(config.head_output_dim, config.head_bottleneck, 0.02, rng));
  return p;
}

template <typename T>
void require_same_layout(const ModelParams<T>& a, const ModelParams<T>& b) {
  if (a.tensors.size() != b.tensors.size()) {
    throw std::invalid_argument("parameter sets differ in size: " +
                                std::to_string(a.tensors.size()) + " vs " +
                                std::to_string(b.tensors.size()));
  }
  for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end();
       ++ia, ++ib) {
    if (ia->first != ib->first) {
      throw std::invalid_argument("parameter name mismatch: " + ia->first +
                                  " vs " + ib->first);
    }
    if (ia->second.shape() != ib->second.shape()) {
      throw std::invalid_argument("parameter " + ia->first + " shape " +
                                  shape_str(ia->second.shape()) + " vs " +
                                  shape_str(ib->second.shape()));
    }
  }
}

template <typename T>
BoundParams BoundParams::bind(Graph<T>& g, const ModelParams<T>& params,
                              bool trainable) {
  BoundParams out;
  for (const auto& [name, tensor] : params.tensors) {
    out.vars_.emplace(name, trainable ? g.parameter(name, tensor)
                                      : g.constant(tensor));
  }
  return out;
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch_size) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw std::invalid_argument("patchify: expected square [C x S x S] image, got " +
                                shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), s = image.dim(1), p = patch_size;
  if (p == 0 || s % p != 0) {
    throw std::invalid_argument("patchify: side " + std::to_string(s) +
                                " is not divisible by patch size " +
                                std::to_string(p));
  }
  const std::size_t grid = s / p;
  Tensor<T> out = Tensor<T>::matrix(grid * grid, c * p * p);
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      T* row = out.data() + (gy * grid + gx) * c * p * p;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            *row++ = image[(ch * s + gy * p + dy) * s + gx * p + dx];
    }
  }
  return out;
}

template <typename T>
Tensor<T> position_resample_matrix(std::size_t to_grid, std::size_t from_grid) {
  // Separable 1-D bilinear weights, then their outer product.
  std::vector<std::vector<std::pair<std::size_t, double>>> taps(to_grid);
  const double ratio = double(from_grid) / double(to_grid);
  for (std::size_t i = 0; i < to_grid; ++i) {
    double src = (double(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, double(from_grid - 1));
    const std::size_t lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, from_grid - 1);
    const double w = src - double(lo);
    taps[i].push_back({lo, 1.0 - w});
    if (hi != lo) taps[i].push_back({hi, w});
  }
  Tensor<T> m = Tensor<T>::matrix(to_grid * to_grid, from_grid * from_grid);
  for (std::size_t y = 0; y < to_grid; ++y)
    for (std::size_t x = 0; x < to_grid; ++x)
      for (auto [sy, wy] : taps[y])
        for (auto [sx, wx] : taps[x])
          m(y * to_grid + x, sy * from_grid + sx) += T(wy * wx);
  return m;
}

template <typename T>
Var embed(Graph<T>& g, const BoundParams& p, const ViTConfig& config,
          const ViewBatch<T>& batch) {
  const std::size_t hw = batch.grid * batch.grid;
  if (batch.patches.rows() != batch.count * hw ||
      batch.patches.cols() != config.patch_dim()) {
    throw std::invalid_argument("embed: patch rows " +
                                shape_str(batch.patches.shape()) +
                                " do not match " + std::to_string(batch.count) +
                                " views of " + std::to_string(hw) + " x " +
                                std::to_string(config.patch_dim()));
  }
  if (batch.grid > config.grid()) {
    throw std::invalid_argument("embed: view grid exceeds positional grid");
  }
  Var x = g.constant(batch.patches);
  Var proj = ops::linear(g, x, p["patch_embed.weight"], p["patch_embed.bias"]);
  Var pos = p["pos_embed"];
  if (batch.grid != config.grid()) {
    Var resample = g.constant(position_resample_matrix<T>(batch.grid, config.grid()));
    pos = ops::matmul(g, resample, pos);
  }
  return ops::assemble_tokens(g, proj, p["obj_token"], p["mask_token"], pos,
                              batch.block_mask);
}

std::vector<std::uint8_t> obj_key_mask(const std::vector<std::uint8_t>& obj_mask,
                                       std::size_t count, std::size_t patches) {
  if (obj_mask.empty()) return {};
  if (obj_mask.size() != count * patches) {
    throw std::invalid_argument("obj mask has " + std::to_string(obj_mask.size()) +
                                " entries, expected " +
                                std::to_string(count * patches));
  }
  std::vector<std::uint8_t> keys(count * (patches + 1));
  for (std::size_t b = 0; b < count; ++b) {
    bool any = false;
    keys[b * (patches + 1)] = 1;
    for (std::size_t j = 0; j < patches; ++j) {
      const std::uint8_t m = obj_mask[b * patches + j] ? 1 : 0;
      keys[b * (patches + 1) + 1 + j] = m;
      any = any || m;
    }
    if (!any) {
      throw std::invalid_argument("obj mask of view " + std::to_string(b) +
                                  " is empty");
    }
  }
  return keys;
}

template <typename T>
Var attention_sublayer(Graph<T>& g, const BoundParams& p,
                       const ViTConfig& config, std::size_t layer, Var x,
                       std::size_t seq_len,
                       const std::vector<std::uint8_t>& key_mask,
                       Tensor<T>* probs_out) {
  Var h = ops::layer_norm(g, x, p[block_name(layer, "norm1.weight")],
                          p[block_name(layer, "norm1.bias")]);
  Var qkv = ops::linear(g, h, p[block_name(layer, "attn.qkv.weight")],
                        p[block_name(layer, "attn.qkv.bias")]);
  Var a = ops::masked_attention(g, qkv, seq_len, config.heads, key_mask, probs_out);
  return ops::linear(g, a, p[block_name(layer, "attn.proj.weight")],
                     p[block_name(layer, "attn.proj.bias")]);
}

template <typename T>
BackboneOutput backbone_forward(Graph<T>& g, const BoundParams& p,
                                const ViTConfig& config,
                                const ViewBatch<T>& batch,
                                ForwardProbe<T>* probe) {
  const std::size_t hw = batch.grid * batch.grid;
  const std::size_t seq = hw + 1;
  const std::vector<std::uint8_t> keys = obj_key_mask(batch.obj_mask, batch.count, hw);

  Var x = embed(g, p, config, batch);
  for (std::size_t l = 0; l < config.depth; ++l) {
    Tensor<T>* probs = nullptr;
    if (probe) {
      probe->layer_inputs.push_back(g.value(x));
      probe->attention.emplace_back();
      probs = &probe->attention.back();
    }
    x = ops::add(g, x, attention_sublayer(g, p, config, l, x, seq, keys, probs));
    Var h = ops::layer_norm(g, x, p[block_name(l, "norm2.weight")],
                            p[block_name(l, "norm2.bias")]);
    h = ops::linear(g, h, p[block_name(l, "mlp.fc1.weight")],
                    p[block_name(l, "mlp.fc1.bias")]);
    h = ops::gelu(g, h);
    h = ops::linear(g, h, p[block_name(l, "mlp.fc2.weight")],
                    p[block_name(l, "mlp.fc2.bias")]);
    x = ops::add(g, x, h);
  }
  x = ops::layer_norm(g, x, p["norm.weight"], p["norm.bias"]);

  std::vector<std::size_t> obj_rows(batch.count), patch_rows;
  patch_rows.reserve(batch.count * hw);
  for (std::size_t b = 0; b < batch.count; ++b) {
    obj_rows[b] = b * seq;
    for (std::size_t i = 0; i < hw; ++i) patch_rows.push_back(b * seq + 1 + i);
  }
  BackboneOutput out;
  out.tokens = x;
  out.obj = ops::gather_rows(g, x, std::move(obj_rows));
  out.patches = ops::gather_rows(g, x, std::move(patch_rows));
  out.count = batch.count;
  out.seq_len = seq;
  return out;
}

template <typename T>
Var head_logits(Graph<T>& g, const BoundParams& p, Var z) {
  Var h = ops::gelu(g, ops::linear(g, z, p["head.fc1.weight"], p["head.fc1.bias"]));
  h = ops::gelu(g, ops::linear(g, h, p["head.fc2.weight"], p["head.fc2.bias"]));
  h = ops::linear(g, h, p["head.fc3.weight"], p["head.fc3.bias"]);
  h = ops::l2_normalize(g, h);
  Var protos = ops::l2_normalize(g, p["head.last.weight"]);
  return ops::matmul(g, h, ops::transpose(g, protos));
}

template <typename T>
Var head_probs(Graph<T>& g, const BoundParams& p, Var z, T temperature) {
  if (!(temperature > T(0))) {
    throw std::invalid_argument("head: temperature must be positive");
  }
  return ops::softmax(g, head_logits(g, p, z), temperature);
}

template <typename T>
Tensor<T> centered_probs(const Tensor<T>& logits, const Tensor<T>& center,
                         T temperature) {
  if (center.size() != logits.cols()) {
    throw std::invalid_argument("center length " + std::to_string(center.size()) +
                                " does not match logits " +
                                shape_str(logits.shape()));
  }
  Tensor<T> shifted = logits;
  for (std::size_t r = 0; r < shifted.rows(); ++r)
    for (std::size_t c = 0; c < shifted.cols(); ++c) shifted(r, c) -= center[c];
  return kernels::softmax(shifted, temperature);
}

#define ODIS_INSTANTIATE(T)                                                   \
  template struct ModelParams<T>;                                             \
  template ModelParams<T> init_params<T>(const ViTConfig&, std::uint64_t);    \
  template void require_same_layout(const ModelParams<T>&,                    \
                                    const ModelParams<T>&);                   \
  template BoundParams BoundParams::bind(Graph<T>&, const ModelParams<T>&,    \
                                         bool);                               \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                 \
  template Tensor<T> position_resample_matrix<T>(std::size_t, std::size_t);   \
  template Var embed(Graph<T>&, const BoundParams&, const ViTConfig&,         \
                     const ViewBatch<T>&);                                    \
  template Var attention_sublayer(Graph<T>&, const BoundParams&,              \
                                  const ViTConfig&, std::size_t, Var,         \
                                  std::size_t,                                \
                                  const std::vector<std::uint8_t>&,           \
                                  Tensor<T>*);                                \
  template BackboneOutput backbone_forward(Graph<T>&, const BoundParams&,     \
                                           const ViTConfig&,                  \
                                           const ViewBatch<T>&,               \
                                           ForwardProbe<T>*);                 \
  template Var head_logits(Graph<T>&, const BoundParams&, Var);               \
  template Var head_probs(Graph<T>&, const BoundParams&, Var, T);             \
  template Tensor<T> centered_probs(const Tensor<T>&, const Tensor<T>&, T);

ODIS_INSTANTIATE(float)
ODIS_INSTANTIATE(double)

#undef ODIS_INSTANTIATE

}  // namespace odis
