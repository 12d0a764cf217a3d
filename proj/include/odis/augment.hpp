#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <vector>

#include "odis/data.hpp"
#include "odis/rng.hpp"
#include "odis/tensor.hpp"

namespace odis {

enum class SamplingStrategy { Uniform, Area };

struct AugmentConfig {
  std::size_t global_side = 32;
  std::size_t local_side = 16;
  std::size_t patch_size = 4;
  std::size_t local_crops = 10;
  double global_scale_min = 0.32;
  double global_scale_max = 1.0;
  double local_scale_min = 0.05;
  double local_scale_max = 0.32;
  std::size_t max_retries = 20;
  double block_mask_prob = 0.5;
  double mask_ratio_min = 0.1;
  double mask_ratio_max = 0.5;
  bool flip = true;
  SamplingStrategy sampling = SamplingStrategy::Area;
  /// Retry global crops until they contain the target object.
  bool object_aware = true;
  /// Attach patch-level object masks to global views.
  bool object_masks = true;
  bool pmlc = false;  // patch masking on local crops
  bool oalc = false;  // object-aware local cropping
  bool malc = false;  // masked attention on local crops

  void validate() const;
};

/// Crop rectangle in source pixels plus horizontal flip.
struct CropBox {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  bool flip = false;
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

struct View {
  Tensor<float> image;              // [3 x side x side]
  std::vector<std::uint8_t> seg;    // side * side instance ids
  CropBox box;
  std::vector<std::uint8_t> obj_mask;    // grid^2 or empty
  std::vector<std::uint8_t> block_mask;  // grid^2 or empty
  double mask_ratio = 0.0;               // ratio the block mask was drawn with
  std::size_t attempts = 0;              // crops drawn before acceptance
  bool fallback = false;                 // bounding-box crop after exhausting retries

  std::size_t side() const { return image.empty() ? 0 : image.dim(1); }
};

struct ViewBundle {
  int target = 0;
  std::array<View, 2> globals;
  std::vector<View> locals;
};

/// Selection probability per instance id for a strategy.
std::map<int, double> target_probabilities(const std::vector<std::uint8_t>& instance_map,
                                           SamplingStrategy strategy);

int sample_target_object(const std::vector<std::uint8_t>& instance_map,
                         SamplingStrategy strategy, Rng& rng);

/// Random-resized-crop rectangle: area fraction in [scale_min, scale_max],
/// log-uniform aspect in [3/4, 4/3]; center crop if nothing fits.
CropBox sample_crop_box(std::size_t side, double scale_min, double scale_max,
                        bool allow_flip, Rng& rng);

/// Applies `box` to the image (bilinear, half-pixel centers) and to the
/// instance map (nearest neighbor), both resized to out_side.
View apply_crop(const Tensor<float>& image,
                const std::vector<std::uint8_t>& instance_map, const CropBox& box,
                std::size_t out_side);

View paired_random_resized_crop(const Tensor<float>& image,
                                const std::vector<std::uint8_t>& instance_map,
                                double scale_min, double scale_max,
                                std::size_t out_side, bool allow_flip, Rng& rng);

/// 1 where any pixel of the patch carries `target`.
std::vector<std::uint8_t> patchify_mask(const std::vector<std::uint8_t>& seg,
                                        std::size_t side, int target,
                                        std::size_t patch_size);

/// Bounding box of `target` inflated by 20 % and clipped to the frame.
CropBox inflated_bbox(const std::vector<std::uint8_t>& instance_map,
                      std::size_t side, int target);

/// Retries random crops until the target survives patchification, at most
/// `max_retries` draws, then falls back to inflated_bbox.
View object_aware_view(const Tensor<float>& image,
                       const std::vector<std::uint8_t>& instance_map, int target,
                       double scale_min, double scale_max, std::size_t out_side,
                       std::size_t patch_size, std::size_t max_retries,
                       bool allow_flip, Rng& rng);

std::array<View, 2> object_aware_global_views(const SceneSample& sample, int target,
                                              const AugmentConfig& config, Rng& rng);

std::vector<View> local_crops(const SceneSample& sample, int target,
                              const AugmentConfig& config, Rng& rng);

/// Greedy rectangular block masking of a grid_h x grid_w patch grid until
/// at least ceil(ratio * HW) patches are masked.
std::vector<std::uint8_t> block_mask(std::size_t grid_h, std::size_t grid_w,
                                     double ratio, Rng& rng);

ViewBundle build_view_bundle(const SceneSample& sample, const AugmentConfig& config,
                             Rng& rng);

}  // namespace odis
