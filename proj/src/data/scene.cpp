#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "odis/data.hpp"

namespace odis {

int SceneSample::primary_class() const {
  auto it = labels.find(1);
  if (it == labels.end()) {
    throw std::invalid_argument("sample " + id + " has no primary instance");
  }
  return it->second;
}

std::map<int, std::size_t> SceneSample::instance_areas() const {
  std::map<int, std::size_t> areas;
  for (std::uint8_t v : instance_map) {
    if (v) ++areas[v];
  }
  return areas;
}

void SceneSample::validate() const {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw std::invalid_argument("sample " + id + ": image must be [C x S x S]");
  }
  if (instance_map.size() != side() * side()) {
    throw std::invalid_argument("sample " + id + ": instance map size mismatch");
  }
  const auto areas = instance_areas();
  for (const auto& [inst, _] : areas) {
    if (!labels.count(inst)) {
      throw std::invalid_argument("sample " + id + ": instance " +
                                  std::to_string(inst) + " has no label");
    }
  }
  for (const auto& [inst, _] : labels) {
    if (!areas.count(inst)) {
      throw std::invalid_argument("sample " + id + ": labeled instance " +
                                  std::to_string(inst) + " is not in the map");
    }
  }
}

void SceneSpec::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("scene spec: " + what);
  };
  if (canvas_side < 4) fail("canvas_side must be at least 4");
  if (min_objects < 1 || max_objects < min_objects) fail("bad object count range");
  if (max_objects > 255) fail("at most 255 instances fit an 8-bit map");
  if (num_classes < 1 || num_classes > kMaxClasses) {
    fail("num_classes must be in [1, " + std::to_string(kMaxClasses) + "]");
  }
  if (!(size_min > 0.0) || !(size_max < 1.0) || size_min > size_max) {
    fail("size range must lie in (0, 1)");
  }
}

ShapeKind class_shape(int class_id) {
  return static_cast<ShapeKind>(class_id % 5);
}

int class_color(int class_id) { return class_id % 4; }

std::vector<std::uint8_t> rasterize(ShapeKind kind, double cx, double cy,
                                    double diameter, std::size_t side) {
  const double r = diameter / 2.0;
  std::vector<std::uint8_t> mask(side * side, 0);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double dx = double(x) + 0.5 - cx;
      const double dy = double(y) + 0.5 - cy;
      const double d2 = dx * dx + dy * dy;
      bool in = false;
      switch (kind) {
        case ShapeKind::Disk:
          in = d2 <= r * r;
          break;
        case ShapeKind::Square:
          in = std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
          break;
        case ShapeKind::Triangle:
          in = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
          break;
        case ShapeKind::Ring:
          in = d2 <= r * r && d2 >= 0.25 * r * r;
          break;
        case ShapeKind::Cross:
          in = (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) ||
               (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
          break;
      }
      mask[y * side + x] = in ? 1 : 0;
    }
  }
  return mask;
}

namespace {

constexpr std::array<std::array<int, 3>, 4> kPalette{{
    {220, 40, 40},   // red
    {40, 190, 60},   // green
    {50, 80, 220},   // blue
    {230, 210, 40},  // yellow
}};

std::uint8_t clamp_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Backgrounds stay in a desaturated band so palette colors remain the
// object signal.
std::vector<std::uint8_t> paint_background(Background style, std::size_t side,
                                           Rng& rng) {
  if (style == Background::Mixed) {
    style = static_cast<Background>(uniform_index(rng, 3));
  }
  std::vector<std::uint8_t> rgb(side * side * 3);
  auto gray = [&] { return uniform(rng, 60.0, 160.0); };
  switch (style) {
    case Background::Flat: {
      const double base = gray();
      std::array<double, 3> c{base + uniform(rng, -15, 15), base + uniform(rng, -15, 15),
                              base + uniform(rng, -15, 15)};
      for (std::size_t i = 0; i < side * side; ++i)
        for (int ch = 0; ch < 3; ++ch) rgb[i * 3 + ch] = clamp_byte(c[ch]);
      break;
    }
    case Background::Gradient: {
      const double a = gray(), b = gray();
      const bool vertical = bernoulli(rng, 0.5);
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const double t = double(vertical ? y : x) / double(side - 1);
          for (int ch = 0; ch < 3; ++ch)
            rgb[(y * side + x) * 3 + ch] = clamp_byte(a + (b - a) * t);
        }
      break;
    }
    case Background::Noise:
    case Background::Mixed: {
      const double base = gray();
      for (std::size_t i = 0; i < side * side; ++i) {
        const double v = base + uniform(rng, -30, 30);
        for (int ch = 0; ch < 3; ++ch) rgb[i * 3 + ch] = clamp_byte(v);
      }
      break;
    }
  }
  return rgb;
}

}  // namespace

SceneSample generate_scene(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t side = spec.canvas_side;
  const std::size_t count =
      spec.min_objects + uniform_index(rng, spec.max_objects - spec.min_objects + 1);

  std::vector<std::uint8_t> rgb = paint_background(spec.background, side, rng);
  std::vector<std::uint8_t> inst(side * side, 0);
  std::map<int, int> labels;
  std::map<int, std::array<double, 3>> colors;

  int next_id = 1;
  for (std::size_t k = 0; k < count; ++k) {
    const int cls = static_cast<int>(uniform_index(rng, spec.num_classes));
    const auto& base = kPalette[static_cast<std::size_t>(class_color(cls))];
    std::array<double, 3> color{};
    for (int ch = 0; ch < 3; ++ch) color[ch] = base[ch] + uniform(rng, -20, 20);

    for (std::size_t attempt = 0; attempt < spec.max_place_attempts; ++attempt) {
      const double diameter = uniform(rng, spec.size_min, spec.size_max) * double(side);
      const double r = diameter / 2.0;
      const double cx = uniform(rng, r, double(side) - r);
      const double cy = uniform(rng, r, double(side) - r);
      const auto shape = rasterize(class_shape(cls), cx, cy, diameter, side);

      std::size_t area = 0;
      bool overlaps = false;
      for (std::size_t i = 0; i < shape.size(); ++i) {
        if (!shape[i]) continue;
        ++area;
        overlaps = overlaps || inst[i] != 0;
      }
      if (area < spec.min_visible_pixels) continue;
      if (overlaps && !spec.occlusion) continue;

      std::vector<std::uint8_t> trial = inst;
      for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i]) trial[i] = static_cast<std::uint8_t>(next_id);
      }
      std::map<int, std::size_t> visible;
      for (std::uint8_t v : trial) {
        if (v) ++visible[v];
      }
      bool ok = true;
      for (int id = 1; id <= next_id; ++id) {
        ok = ok && visible[id] >= spec.min_visible_pixels;
      }
      if (!ok) continue;

      inst = std::move(trial);
      labels[next_id] = cls;
      colors[next_id] = color;
      ++next_id;
      break;
    }
  }
  if (labels.empty()) {
    throw std::runtime_error("scene spec unsatisfiable: no object could be placed");
  }

  SceneSample s;
  s.image = Tensor<float>({3, side, side});
  for (std::size_t i = 0; i < side * side; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      std::uint8_t v = rgb[i * 3 + ch];
      if (inst[i]) v = clamp_byte(colors[inst[i]][ch]);
      s.image[static_cast<std::size_t>(ch) * side * side + i] = float(v) / 255.0f;
    }
  }
  s.instance_map = std::move(inst);
  s.labels = std::move(labels);
  return s;
}

SceneSample generate_indexed_scene(const SceneSpec& spec, std::uint64_t seed,
                                   std::size_t index) {
  Rng rng(derive_seed({seed, 0x5ce9e, index}));
  SceneSample s = generate_scene(spec, rng);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  s.id = buf;
  return s;
}

}  // namespace odis
