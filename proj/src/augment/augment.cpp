#include "odis/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace odis {

void AugmentConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("augment config: " + what);
  };
  if (patch_size == 0 || global_side % patch_size || local_side % patch_size) {
    fail("crop sides must be multiples of patch_size");
  }
  if (global_side < patch_size || local_side < patch_size) {
    fail("crop sides must be at least one patch");
  }
  auto check_range = [&](double lo, double hi, const char* what) {
    if (!(lo > 0.0) || !(hi <= 1.0) || lo > hi) {
      fail(std::string(what) + " scale range must lie in (0, 1]");
    }
  };
  check_range(global_scale_min, global_scale_max, "global");
  check_range(local_scale_min, local_scale_max, "local");
  if (max_retries == 0) fail("max_retries must be positive");
  if (block_mask_prob < 0.0 || block_mask_prob > 1.0) fail("block_mask_prob outside [0, 1]");
  if (mask_ratio_min < 0.0 || mask_ratio_max > 1.0 || mask_ratio_min > mask_ratio_max) {
    fail("mask ratio range must lie in [0, 1]");
  }
  if (object_masks && !object_aware) {
    fail("object masks require object-aware global cropping");
  }
}

std::map<int, double> target_probabilities(const std::vector<std::uint8_t>& instance_map,
                                           SamplingStrategy strategy) {
  std::map<int, std::size_t> areas;
  for (std::uint8_t v : instance_map) {
    if (v) ++areas[v];
  }
  if (areas.empty()) {
    throw std::invalid_argument("target sampling: instance map has no object");
  }
  std::size_t total = 0;
  for (const auto& [_, a] : areas) total += a;
  std::map<int, double> probs;
  for (const auto& [id, a] : areas) {
    probs[id] = strategy == SamplingStrategy::Area
                    ? double(a) / double(total)
                    : 1.0 / double(areas.size());
  }
  return probs;
}

int sample_target_object(const std::vector<std::uint8_t>& instance_map,
                         SamplingStrategy strategy, Rng& rng) {
  const auto probs = target_probabilities(instance_map, strategy);
  std::vector<int> ids;
  std::vector<double> weights;
  for (const auto& [id, p] : probs) {
    ids.push_back(id);
    weights.push_back(p);
  }
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  return ids[pick(rng)];
}

CropBox sample_crop_box(std::size_t side, double scale_min, double scale_max,
                        bool allow_flip, Rng& rng) {
  const double area = double(side) * double(side);
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  CropBox box{0, 0, side, side, false};
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, scale_min, scale_max);
    const double aspect = std::exp(uniform(rng, log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (w == 0 || h == 0 || w > side || h > side) continue;
    box.x = std::uniform_int_distribution<std::size_t>(0, side - w)(rng);
    box.y = std::uniform_int_distribution<std::size_t>(0, side - h)(rng);
    box.w = w;
    box.h = h;
    break;
  }
  box.flip = allow_flip && bernoulli(rng, 0.5);
  return box;
}

View apply_crop(const Tensor<float>& image,
                const std::vector<std::uint8_t>& instance_map, const CropBox& box,
                std::size_t out_side) {
  const std::size_t channels = image.dim(0), side = image.dim(1);
  if (box.w == 0 || box.h == 0 || box.x + box.w > side || box.y + box.h > side) {
    throw std::invalid_argument("crop box outside the frame");
  }
  if (instance_map.size() != side * side) {
    throw std::invalid_argument("instance map does not match image");
  }
  struct Tap {
    std::size_t lo, hi, nearest;
    float w;
  };
  auto taps = [&](std::size_t origin, std::size_t extent) {
    std::vector<Tap> t(out_side);
    const double ratio = double(extent) / double(out_side);
    for (std::size_t o = 0; o < out_side; ++o) {
      const double s =
          std::clamp((double(o) + 0.5) * ratio - 0.5, 0.0, double(extent - 1));
      const auto lo = static_cast<std::size_t>(std::floor(s));
      t[o].lo = origin + lo;
      t[o].hi = origin + std::min(lo + 1, extent - 1);
      t[o].w = float(s - double(lo));
      t[o].nearest =
          origin + std::min(static_cast<std::size_t>((double(o) + 0.5) * ratio),
                            extent - 1);
    }
    return t;
  };
  std::vector<Tap> tx = taps(box.x, box.w);
  const std::vector<Tap> ty = taps(box.y, box.h);
  if (box.flip) std::reverse(tx.begin(), tx.end());

  View v;
  v.box = box;
  v.image = Tensor<float>({channels, out_side, out_side});
  v.seg.resize(out_side * out_side);
  for (std::size_t oy = 0; oy < out_side; ++oy) {
    const Tap& y = ty[oy];
    for (std::size_t ox = 0; ox < out_side; ++ox) {
      const Tap& x = tx[ox];
      for (std::size_t c = 0; c < channels; ++c) {
        const float* plane = image.data() + c * side * side;
        const float top = plane[y.lo * side + x.lo] * (1.0f - x.w) + plane[y.lo * side + x.hi] * x.w;
        const float bot = plane[y.hi * side + x.lo] * (1.0f - x.w) + plane[y.hi * side + x.hi] * x.w;
        v.image[(c * out_side + oy) * out_side + ox] = top * (1.0f - y.w) + bot * y.w;
      }
      v.seg[oy * out_side + ox] = instance_map[y.nearest * side + x.nearest];
    }
  }
  return v;
}

View paired_random_resized_crop(const Tensor<float>& image,
                                const std::vector<std::uint8_t>& instance_map,
                                double scale_min, double scale_max,
                                std::size_t out_side, bool allow_flip, Rng& rng) {
  if (!(scale_min > 0.0) || !(scale_max <= 1.0) || scale_min > scale_max) {
    throw std::invalid_argument("random resized crop: scale range must lie in (0, 1]");
  }
  const CropBox box = sample_crop_box(image.dim(1), scale_min, scale_max, allow_flip, rng);
  View v = apply_crop(image, instance_map, box, out_side);
  v.attempts = 1;
  return v;
}

std::vector<std::uint8_t> patchify_mask(const std::vector<std::uint8_t>& seg,
                                        std::size_t side, int target,
                                        std::size_t patch_size) {
  if (patch_size == 0 || side % patch_size != 0 || seg.size() != side * side) {
    throw std::invalid_argument("patchify_mask: side " + std::to_string(side) +
                                " not divisible by patch size " +
                                std::to_string(patch_size));
  }
  const std::size_t grid = side / patch_size;
  std::vector<std::uint8_t> mask(grid * grid, 0);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      if (seg[y * side + x] == target) mask[(y / patch_size) * grid + x / patch_size] = 1;
  return mask;
}

CropBox inflated_bbox(const std::vector<std::uint8_t>& instance_map,
                      std::size_t side, int target) {
  std::size_t x0 = side, y0 = side, x1 = 0, y1 = 0;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      if (instance_map[y * side + x] == target) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x0 == side) {
    throw std::invalid_argument("target " + std::to_string(target) +
                                " is absent from the instance map");
  }
  auto inflate = [side](std::size_t lo, std::size_t hi, std::size_t& start,
                        std::size_t& extent) {
    const double len = double(hi - lo + 1);
    const double grown = std::ceil(len * 1.2);
    const double center = (double(lo) + double(hi) + 1.0) / 2.0;
    const double a = std::max(0.0, std::floor(center - grown / 2.0));
    const double b = std::min(double(side), a + grown);
    start = static_cast<std::size_t>(a);
    extent = static_cast<std::size_t>(b) - start;
    if (start > lo) start = lo;  // never clip the object itself
    if (start + extent <= hi) extent = hi + 1 - start;
  };
  CropBox box;
  inflate(x0, x1, box.x, box.w);
  inflate(y0, y1, box.y, box.h);
  return box;
}

namespace {
bool any_set(const std::vector<std::uint8_t>& m) {
  return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
}
}  // namespace

View object_aware_view(const Tensor<float>& image,
                       const std::vector<std::uint8_t>& instance_map, int target,
                       double scale_min, double scale_max, std::size_t out_side,
                       std::size_t patch_size, std::size_t max_retries,
                       bool allow_flip, Rng& rng) {
  const std::size_t side = image.dim(1);
  if (std::find(instance_map.begin(), instance_map.end(), target) == instance_map.end()) {
    throw std::invalid_argument("target " + std::to_string(target) +
                                " is absent from the instance map");
  }
  for (std::size_t attempt = 1; attempt <= max_retries; ++attempt) {
    View v = paired_random_resized_crop(image, instance_map, scale_min, scale_max,
                                        out_side, allow_flip, rng);
    v.attempts = attempt;
    if (any_set(patchify_mask(v.seg, out_side, target, patch_size))) return v;
  }
  View v = apply_crop(image, instance_map, inflated_bbox(instance_map, side, target),
                      out_side);
  v.attempts = max_retries;
  v.fallback = true;
  if (!any_set(patchify_mask(v.seg, out_side, target, patch_size))) {
    throw std::runtime_error("target " + std::to_string(target) +
                             " vanished from its bounding-box crop");
  }
  return v;
}

std::array<View, 2> object_aware_global_views(const SceneSample& sample, int target,
                                              const AugmentConfig& config, Rng& rng) {
  std::array<View, 2> views;
  for (View& v : views) {
    v = object_aware_view(sample.image, sample.instance_map, target,
                          config.global_scale_min, config.global_scale_max,
                          config.global_side, config.patch_size, config.max_retries,
                          config.flip, rng);
  }
  return views;
}

namespace {

void maybe_block_mask(View& v, const AugmentConfig& config, Rng& rng) {
  if (!bernoulli(rng, config.block_mask_prob)) return;
  const std::size_t grid = v.side() / config.patch_size;
  v.mask_ratio = uniform(rng, config.mask_ratio_min, config.mask_ratio_max);
  v.block_mask = block_mask(grid, grid, v.mask_ratio, rng);
}

}  // namespace

std::vector<View> local_crops(const SceneSample& sample, int target,
                              const AugmentConfig& config, Rng& rng) {
  std::vector<View> out;
  out.reserve(config.local_crops);
  for (std::size_t i = 0; i < config.local_crops; ++i) {
    View v;
    // Masked attention on a local needs the target inside it, so MALC also
    // re-crops.
    if (config.oalc || config.malc) {
      v = object_aware_view(sample.image, sample.instance_map, target,
                            config.local_scale_min, config.local_scale_max,
                            config.local_side, config.patch_size, config.max_retries,
                            config.flip, rng);
    } else {
      v = paired_random_resized_crop(sample.image, sample.instance_map,
                                     config.local_scale_min, config.local_scale_max,
                                     config.local_side, config.flip, rng);
    }
    if (config.malc) {
      v.obj_mask = patchify_mask(v.seg, config.local_side, target, config.patch_size);
    }
    if (config.pmlc) maybe_block_mask(v, config, rng);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<std::uint8_t> block_mask(std::size_t grid_h, std::size_t grid_w,
                                     double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0) {
    throw std::invalid_argument("block_mask: ratio must lie in [0, 1]");
  }
  const std::size_t total = grid_h * grid_w;
  std::vector<std::uint8_t> mask(total, 0);
  const auto target = static_cast<std::size_t>(std::ceil(ratio * double(total) - 1e-9));
  std::size_t count = 0;
  const double log_lo = std::log(0.3), log_hi = std::log(1.0 / 0.3);
  std::size_t failures = 0;
  while (count < target && failures < 10) {
    const std::size_t remaining = target - count;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
      const double lo = double(std::min<std::size_t>(4, remaining));
      const double area = uniform(rng, lo, double(remaining));
      const double aspect = std::exp(uniform(rng, log_lo, log_hi));
      const auto h = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
      const auto w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
      if (h == 0 || w == 0 || h > grid_h || w > grid_w) continue;
      const std::size_t top = std::uniform_int_distribution<std::size_t>(0, grid_h - h)(rng);
      const std::size_t left = std::uniform_int_distribution<std::size_t>(0, grid_w - w)(rng);
      std::size_t fresh = 0;
      for (std::size_t y = top; y < top + h; ++y)
        for (std::size_t x = left; x < left + w; ++x) fresh += mask[y * grid_w + x] ? 0 : 1;
      if (fresh == 0 || fresh > remaining) continue;
      for (std::size_t y = top; y < top + h; ++y)
        for (std::size_t x = left; x < left + w; ++x) mask[y * grid_w + x] = 1;
      count += fresh;
      placed = true;
    }
    if (!placed) ++failures;
  }
  // Top up with single patches when rectangles stop fitting.
  while (count < target) {
    std::vector<std::size_t> free_cells;
    for (std::size_t i = 0; i < total; ++i)
      if (!mask[i]) free_cells.push_back(i);
    mask[free_cells[uniform_index(rng, free_cells.size())]] = 1;
    ++count;
  }
  return mask;
}

ViewBundle build_view_bundle(const SceneSample& sample, const AugmentConfig& config,
                             Rng& rng) {
  config.validate();
  SceneSample whole;
  const SceneSample* src = &sample;
  if (!sample.has_mask) {
    // No segmentation: the main object is taken to cover the whole image.
    whole.image = sample.image;
    whole.instance_map.assign(sample.instance_map.size(), 1);
    whole.labels = {{1, sample.labels.empty() ? 0 : sample.labels.begin()->second}};
    src = &whole;
  }

  ViewBundle bundle;
  bundle.target = sample_target_object(src->instance_map, config.sampling, rng);
  if (config.object_aware) {
    bundle.globals = object_aware_global_views(*src, bundle.target, config, rng);
  } else {
    for (View& v : bundle.globals) {
      v = paired_random_resized_crop(src->image, src->instance_map,
                                     config.global_scale_min, config.global_scale_max,
                                     config.global_side, config.flip, rng);
    }
  }
  for (View& v : bundle.globals) {
    if (config.object_masks) {
      v.obj_mask = patchify_mask(v.seg, config.global_side, bundle.target,
                                 config.patch_size);
    }
    maybe_block_mask(v, config, rng);
  }
  bundle.locals = local_crops(*src, bundle.target, config, rng);
  return bundle;
}

}  // namespace odis
