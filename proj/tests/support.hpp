#pragma once

#include <cstdint>
#include <vector>

#include "odis/distill.hpp"
#include "odis/rng.hpp"
#include "odis/vit.hpp"

namespace odis::testing {

inline ViTConfig micro_vit(std::size_t depth = 2) {
  ViTConfig c;
  c.image_side = 16;
  c.patch_size = 4;
  c.depth = depth;
  c.embed_dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.head_hidden = 32;
  c.head_bottleneck = 16;
  c.head_output_dim = 32;
  return c;
}

template <typename T>
Tensor<T> random_image(std::size_t side, Rng& rng, std::size_t channels = 3) {
  Tensor<T> img({channels, side, side});
  for (T& v : img.values()) v = T(uniform(rng, 0.0, 1.0));
  return img;
}

template <typename T>
ViewBatch<T> batch_of(const std::vector<Tensor<T>>& images, std::size_t patch_size) {
  ViewBatch<T> b;
  b.count = images.size();
  b.grid = images.at(0).dim(1) / patch_size;
  std::vector<T> rows;
  for (const auto& img : images) {
    const Tensor<T> p = patchify(img, patch_size);
    rows.insert(rows.end(), p.values().begin(), p.values().end());
  }
  b.patches = Tensor<T>::matrix(b.count * b.grid * b.grid, images[0].dim(0) * patch_size *
                                                               patch_size, std::move(rows));
  return b;
}

/// Random binary mask with at least one set entry.
inline std::vector<std::uint8_t> random_mask(std::size_t n, Rng& rng, double p = 0.4) {
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = bernoulli(rng, p);
  m[uniform_index(rng, n)] = 1;
  return m;
}

/// Micro training setup on 16 x 16 scenes: every loss term is exercised.
inline TrainConfig micro_train(std::size_t depth = 2) {
  TrainConfig c;
  c.model = micro_vit(depth);
  c.augment.global_side = 16;
  c.augment.local_side = 8;
  c.augment.patch_size = 4;
  c.augment.local_crops = 2;
  c.augment.block_mask_prob = 1.0;
  c.batch_size = 2;
  c.total_steps = 10;
  return c;
}

inline SceneSpec micro_scenes() {
  SceneSpec s;
  s.canvas_side = 16;
  s.min_objects = 1;
  s.max_objects = 2;
  s.size_min = 0.35;
  s.size_max = 0.6;
  s.min_visible_pixels = 8;
  return s;
}

inline std::vector<ViewBundle> micro_batch(const TrainConfig& c, std::uint64_t seed,
                                           std::size_t n = 2) {
  std::vector<ViewBundle> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng r(derive_seed({seed, 0xba7c4ULL, i}));
    out.push_back(build_view_bundle(generate_indexed_scene(micro_scenes(), seed, i), c.augment, r));
  }
  return out;
}

}  // namespace odis::testing
