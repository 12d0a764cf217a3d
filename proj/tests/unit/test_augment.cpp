#include <algorithm>
#include <cmath>
#include <set>

#include <doctest.h>

#include "../support.hpp"
#include "odis/augment.hpp"

using namespace odis;
using namespace odis::testing;

namespace {

SceneSample toy_scene(std::size_t side, const std::vector<std::uint8_t>& map, Rng& rng) {
  SceneSample s;
  s.id = "toy";
  s.image = random_image<float>(side, rng);
  s.instance_map = map;
  for (std::uint8_t v : map)
    if (v) s.labels[v] = v % 8;
  return s;
}

// Instance 1 covering `a` pixels, instance 2 covering `b` pixels, rest background.
std::vector<std::uint8_t> two_areas(std::size_t side, std::size_t a, std::size_t b) {
  std::vector<std::uint8_t> m(side * side, 0);
  std::fill_n(m.begin(), a, 1);
  std::fill_n(m.begin() + a, b, 2);
  return m;
}

SceneSample rectangle_scene(std::size_t side, std::size_t x, std::size_t y, std::size_t w,
                            std::size_t h, Rng& rng) {
  std::vector<std::uint8_t> m(side * side, 0);
  for (std::size_t r = y; r < y + h; ++r)
    for (std::size_t c = x; c < x + w; ++c) m[r * side + c] = 1;
  return toy_scene(side, m, rng);
}

std::size_t count(const std::vector<std::uint8_t>& m) {
  return std::size_t(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
}

}  // namespace

TEST_SUITE("augment") {

TEST_CASE("target sampling probabilities") {
  const auto one = two_areas(8, 20, 0);
  const auto p1 = target_probabilities(one, SamplingStrategy::Area);
  REQUIRE(p1.size() == 1);
  CHECK(p1.at(1) == 1.0);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) CHECK(sample_target_object(one, SamplingStrategy::Uniform, rng) == 1);

  const auto m = two_areas(8, 10, 30);
  const auto area = target_probabilities(m, SamplingStrategy::Area);
  CHECK(area.at(1) == 0.25);
  CHECK(area.at(2) == 0.75);
  const auto uni = target_probabilities(m, SamplingStrategy::Uniform);
  CHECK(uni.at(1) == 0.5);
  CHECK(uni.at(2) == 0.5);

  CHECK_THROWS_AS(sample_target_object(std::vector<std::uint8_t>(64, 0), SamplingStrategy::Area, rng),
                  std::invalid_argument);
}

TEST_CASE("area sampling frequency on the [10, 30] fixture") {
  const auto m = two_areas(8, 10, 30);
  Rng rng(2024);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += sample_target_object(m, SamplingStrategy::Area, rng) == 2;
  CHECK(std::abs(double(hits) / n - 0.75) < 0.01);
  hits = 0;
  for (int i = 0; i < n; ++i) hits += sample_target_object(m, SamplingStrategy::Uniform, rng) == 2;
  CHECK(std::abs(double(hits) / n - 0.5) < 0.01);
}

TEST_CASE("full-scale crop without flip is the identity") {
  Rng rng(3);
  std::vector<std::uint8_t> map(16 * 16);
  for (auto& v : map) v = std::uint8_t(uniform_index(rng, 4));
  const SceneSample s = toy_scene(16, map, rng);
  const View v = paired_random_resized_crop(s.image, s.instance_map, 1.0, 1.0, 16, false, rng);
  CHECK(v.box == CropBox{0, 0, 16, 16, false});
  CHECK(v.image == s.image);
  CHECK(v.seg == s.instance_map);
}

TEST_CASE("flip mirrors image and instance map together") {
  Rng rng(4);
  std::vector<std::uint8_t> map(16 * 16);
  for (auto& v : map) v = std::uint8_t(uniform_index(rng, 4));
  const SceneSample s = toy_scene(16, map, rng);
  const View v = apply_crop(s.image, s.instance_map, {0, 0, 16, 16, true}, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      CHECK(v.seg[y * 16 + x] == map[y * 16 + 15 - x]);
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(v.image[(c * 16 + y) * 16 + x] == s.image[(c * 16 + y) * 16 + 15 - x]);
    }
}

TEST_CASE("random crops keep geometry and only carry ids from their rectangle") {
  Rng rng(5);
  std::vector<std::uint8_t> map(32 * 32);
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = std::uint8_t((i % 32) / 4 + 8 * ((i / 32) / 16));
  const SceneSample s = toy_scene(32, map, rng);
  for (int trial = 0; trial < 200; ++trial) {
    const View v = paired_random_resized_crop(s.image, s.instance_map, 0.05, 1.0, 16, true, rng);
    const double frac = double(v.box.w * v.box.h) / (32.0 * 32.0);
    const double aspect = double(v.box.w) / double(v.box.h);
    const bool full = v.box.w == 32 && v.box.h == 32;
    if (!full) {
      // Rounding to whole pixels can move the sampled values slightly.
      CHECK(frac > 0.03);
      CHECK(aspect > 0.6);
      CHECK(aspect < 1.6);
    }
    std::set<std::uint8_t> inside;
    for (std::size_t y = v.box.y; y < v.box.y + v.box.h; ++y)
      for (std::size_t x = v.box.x; x < v.box.x + v.box.w; ++x) inside.insert(map[y * 32 + x]);
    for (std::uint8_t id : v.seg) CHECK(inside.count(id) == 1);
    CHECK(apply_crop(s.image, s.instance_map, v.box, 16).seg == v.seg);
    CHECK(apply_crop(s.image, s.instance_map, v.box, 16).image == v.image);
  }
  CHECK_THROWS_AS(paired_random_resized_crop(s.image, s.instance_map, 0.0, 1.0, 16, true, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(apply_crop(s.image, s.instance_map, {20, 0, 16, 16, false}, 16),
                  std::invalid_argument);
}

TEST_CASE("patchify mask uses any-overlap") {
  std::vector<std::uint8_t> seg(8 * 8, 0);
  CHECK(count(patchify_mask(seg, 8, 1, 4)) == 0);
  seg[5 * 8 + 6] = 1;
  const auto one = patchify_mask(seg, 8, 1, 4);
  CHECK(count(one) == 1);
  CHECK(one[3] == 1);
  std::fill(seg.begin(), seg.end(), 1);
  CHECK(count(patchify_mask(seg, 8, 1, 4)) == 4);
  CHECK(count(patchify_mask(seg, 8, 2, 4)) == 0);
  CHECK_THROWS_AS(patchify_mask(seg, 8, 1, 3), std::invalid_argument);
}

TEST_CASE("object filling the frame is found on the first attempt") {
  Rng rng(6);
  const SceneSample s = toy_scene(16, std::vector<std::uint8_t>(256, 1), rng);
  for (int i = 0; i < 50; ++i) {
    const View v = object_aware_view(s.image, s.instance_map, 1, 0.32, 1.0, 16, 4, 20, true, rng);
    CHECK(v.attempts == 1);
    CHECK_FALSE(v.fallback);
  }
  CHECK_THROWS_AS(object_aware_view(s.image, s.instance_map, 3, 0.32, 1.0, 16, 4, 20, true, rng),
                  std::invalid_argument);
}

TEST_CASE("retries stop at the limit and fall back to the inflated box") {
  Rng rng(7);
  // One-pixel object in a corner of a 32 x 32 frame with tiny crops: most
  // draws miss it.
  const SceneSample s = rectangle_scene(32, 30, 31, 1, 1, rng);
  std::size_t fallbacks = 0;
  for (int i = 0; i < 300; ++i) {
    const View v = object_aware_view(s.image, s.instance_map, 1, 0.02, 0.05, 16, 4, 20, true, rng);
    CHECK(v.attempts >= 1);
    CHECK(v.attempts <= 20);
    CHECK(count(patchify_mask(v.seg, 16, 1, 4)) >= 1);
    if (v.fallback) {
      ++fallbacks;
      CHECK(v.box.w == 2);
      CHECK(v.box.h == 2);
    }
  }
  CHECK(fallbacks > 0);
}

TEST_CASE("inflated box grows by 20 percent, stays in frame, contains the object") {
  Rng rng(8);
  const SceneSample s = rectangle_scene(32, 10, 4, 10, 5, rng);
  const CropBox b = inflated_bbox(s.instance_map, 32, 1);
  CHECK(b.w == 12);
  CHECK(b.h == 6);
  CHECK(b.x == 9);
  CHECK(b.y <= 4);
  CHECK(b.y + b.h >= 9);
  const SceneSample edge = rectangle_scene(32, 0, 0, 32, 3, rng);
  const CropBox e = inflated_bbox(edge.instance_map, 32, 1);
  CHECK(e.x == 0);
  CHECK(e.w == 32);
  CHECK(e.y == 0);
  CHECK(e.h == 4);
  CHECK_THROWS_AS(inflated_bbox(s.instance_map, 32, 2), std::invalid_argument);
}

TEST_CASE("fallback crop keeps every object of at least one patch on an 8 x 8 grid") {
  // All rectangles of size >= 1 patch (2 x 2 pixels at patch 2) at every
  // placement, for an upsampling and a downsampling output side.
  Rng rng(9);
  std::size_t checked = 0;
  for (std::size_t w = 2; w <= 8; ++w)
    for (std::size_t h = 2; h <= 8; ++h)
      for (std::size_t y = 0; y + h <= 8; ++y)
        for (std::size_t x = 0; x + w <= 8; ++x) {
          const SceneSample s = rectangle_scene(8, x, y, w, h, rng);
          const CropBox box = inflated_bbox(s.instance_map, 8, 1);
          for (std::size_t out : {8, 4}) {
            const View v = apply_crop(s.image, s.instance_map, box, out);
            CHECK(count(patchify_mask(v.seg, out, 1, 2)) >= 1);
            ++checked;
          }
        }
  CHECK(checked == 2 * 784);
}

TEST_CASE("local crops follow the configuration flags") {
  Rng rng(10);
  SceneSample s = rectangle_scene(32, 2, 2, 5, 5, rng);
  AugmentConfig c;
  c.local_crops = 0;
  CHECK(local_crops(s, 1, c, rng).empty());

  c = AugmentConfig{};
  for (const View& v : local_crops(s, 1, c, rng)) {
    CHECK(v.obj_mask.empty());
    CHECK(v.block_mask.empty());
    CHECK(v.side() == 16);
  }
  c.oalc = true;
  for (int trial = 0; trial < 20; ++trial)
    for (const View& v : local_crops(s, 1, c, rng)) {
      CHECK(v.obj_mask.empty());
      CHECK(count(patchify_mask(v.seg, 16, 1, 4)) >= 1);
    }
  c.oalc = false;
  c.malc = true;
  for (const View& v : local_crops(s, 1, c, rng)) CHECK(count(v.obj_mask) >= 1);
  c.malc = false;
  c.pmlc = true;
  c.block_mask_prob = 1.0;
  for (const View& v : local_crops(s, 1, c, rng)) CHECK(v.block_mask.size() == 16);
}

TEST_CASE("block mask examples") {
  Rng rng(11);
  CHECK(count(block_mask(8, 8, 0.0, rng)) == 0);
  CHECK(count(block_mask(8, 8, 1.0, rng)) == 64);
  for (int seed = 0; seed < 1000; ++seed) {
    Rng r(static_cast<std::uint64_t>(seed));
    const std::size_t n = count(block_mask(8, 8, 0.3, r));
    CHECK(n >= 20);
    CHECK(n <= 28);
  }
  CHECK_THROWS_AS(block_mask(8, 8, 1.5, rng), std::invalid_argument);
}

TEST_CASE("block mask fraction stays within [r, r + 8 / HW]") {
  Rng rng(12);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t gh = 2 + uniform_index(rng, 9), gw = 2 + uniform_index(rng, 9);
    const double r = uniform(rng, 0.0, 1.0);
    const double frac = double(count(block_mask(gh, gw, r, rng))) / double(gh * gw);
    CHECK(frac >= r - 1e-12);
    CHECK(frac <= r + 8.0 / double(gh * gw) + 1e-12);
  }
}

TEST_CASE("block masks contain rectangles of at least four patches") {
  // The first placement on an empty 8 x 8 grid is a single rectangle.
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = block_mask(8, 8, 0.1, rng);  // target 7 patches
    std::size_t rows = 0, cols = 0;
    for (std::size_t y = 0; y < 8; ++y) {
      bool any = false;
      for (std::size_t x = 0; x < 8; ++x) any = any || m[y * 8 + x];
      rows += any;
    }
    for (std::size_t x = 0; x < 8; ++x) {
      bool any = false;
      for (std::size_t y = 0; y < 8; ++y) any = any || m[y * 8 + x];
      cols += any;
    }
    CHECK(count(m) == 7);
    CHECK(rows * cols >= 4);
  }
}

TEST_CASE("view bundles: masks, determinism, block-mask rate and ratio range") {
  Rng rng(14);
  std::vector<std::uint8_t> map(32 * 32, 0);
  for (std::size_t y = 4; y < 10; ++y)
    for (std::size_t x = 4; x < 10; ++x) map[y * 32 + x] = 1;
  for (std::size_t y = 20; y < 30; ++y)
    for (std::size_t x = 18; x < 30; ++x) map[y * 32 + x] = 2;
  const SceneSample s = toy_scene(32, map, rng);
  AugmentConfig c;
  c.local_crops = 2;

  Rng a(77), b(77);
  const ViewBundle x = build_view_bundle(s, c, a);
  const ViewBundle y = build_view_bundle(s, c, b);
  CHECK(x.target == y.target);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(x.globals[i].image == y.globals[i].image);
    CHECK(x.globals[i].obj_mask == y.globals[i].obj_mask);
    CHECK(x.globals[i].block_mask == y.globals[i].block_mask);
    CHECK(x.locals[i].image == y.locals[i].image);
  }

  std::size_t masked = 0, views = 0;
  for (int i = 0; i < 2000; ++i) {
    const ViewBundle v = build_view_bundle(s, c, rng);
    for (const View& g : v.globals) {
      CHECK(count(g.obj_mask) >= 1);
      CHECK(g.obj_mask == patchify_mask(g.seg, 32, v.target, 4));
      ++views;
      if (!g.block_mask.empty()) {
        ++masked;
        CHECK(g.mask_ratio >= 0.1);
        CHECK(g.mask_ratio <= 0.5);
      }
    }
    CHECK(v.locals.size() == 2);
  }
  CHECK(std::abs(double(masked) / double(views) - 0.5) < 0.03);
}

TEST_CASE("samples without masks are treated as one whole-image object") {
  Rng rng(15);
  SceneSample s = rectangle_scene(32, 3, 3, 4, 4, rng);
  s.has_mask = false;
  AugmentConfig c;
  c.local_crops = 1;
  const ViewBundle v = build_view_bundle(s, c, rng);
  CHECK(v.target == 1);
  for (const View& g : v.globals) CHECK(count(g.obj_mask) == 64);
}

TEST_CASE("augment config validation") {
  AugmentConfig c;
  CHECK_NOTHROW(c.validate());
  c.global_side = 30;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AugmentConfig{};
  c.mask_ratio_min = 0.6;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AugmentConfig{};
  c.object_aware = false;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);  // masks need object-aware crops
}

}  // TEST_SUITE
