#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <doctest.h>

#include "odis/data.hpp"

using namespace odis;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::size_t pixels(const std::vector<std::uint8_t>& m) {
  return std::size_t(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("rasterized areas match closed forms") {
  // Square: half-width 0.85 r around a pixel-aligned center.
  const auto sq = rasterize(ShapeKind::Square, 16.0, 16.0, 20.0, 32);
  // |x + 0.5 - 16| <= 8.5 for x in 7..24 -> 18 columns
  CHECK(pixels(sq) == 18 * 18);
  const auto disk = rasterize(ShapeKind::Disk, 16.0, 16.0, 24.0, 32);
  CHECK(std::abs(double(pixels(disk)) - M_PI * 144.0) < 0.05 * M_PI * 144.0);
  const auto ring = rasterize(ShapeKind::Ring, 16.0, 16.0, 24.0, 32);
  CHECK(std::abs(double(pixels(ring)) - 0.75 * M_PI * 144.0) < 0.06 * M_PI * 144.0);
  const auto cross = rasterize(ShapeKind::Cross, 16.0, 16.0, 24.0, 32);
  // two 8 x 24 bars sharing an 8 x 8 center
  CHECK(std::abs(double(pixels(cross)) - (2.0 * 8 * 24 - 64)) < 40.0);
  const auto tri = rasterize(ShapeKind::Triangle, 16.0, 16.0, 24.0, 32);
  CHECK(std::abs(double(pixels(tri)) - 0.5 * 24 * 24) < 30.0);
}

TEST_CASE("class ids map to distinct shape and color pairs") {
  std::set<std::pair<int, int>> seen;
  for (int c = 0; c < int(kMaxClasses); ++c)
    seen.insert({int(class_shape(c)), class_color(c)});
  CHECK(seen.size() == kMaxClasses);
}

TEST_CASE("single object scenes") {
  SceneSpec spec;
  spec.min_objects = spec.max_objects = 1;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const SceneSample s = generate_scene(spec, rng);
    REQUIRE(s.labels.size() == 1);
    const auto areas = s.instance_areas();
    REQUIRE(areas.size() == 1);
    CHECK(areas.at(1) >= 16);
    // Every object pixel carries the one object color.
    const std::size_t n = 32 * 32;
    std::set<std::array<float, 3>> colors;
    for (std::size_t i = 0; i < n; ++i)
      if (s.instance_map[i]) colors.insert({s.image[i], s.image[n + i], s.image[2 * n + i]});
    CHECK(colors.size() == 1);
    CHECK_NOTHROW(s.validate());
  }
}

TEST_CASE("scenes keep the visible-area floor and consistent labels") {
  SceneSpec spec;
  for (bool occlusion : {false, true}) {
    spec.occlusion = occlusion;
    for (std::uint64_t i = 0; i < 200; ++i) {
      const SceneSample s = generate_indexed_scene(spec, 3, i);
      CHECK_NOTHROW(s.validate());
      CHECK(s.labels.size() >= 1);
      CHECK(s.labels.size() <= spec.max_objects);
      CHECK(s.labels.count(1) == 1);
      for (const auto& [id, area] : s.instance_areas()) {
        CHECK(area >= spec.min_visible_pixels);
        CHECK(s.labels.count(id) == 1);
      }
      for (const auto& [id, cls] : s.labels) {
        CHECK(cls >= 0);
        CHECK(cls < int(spec.num_classes));
      }
    }
  }
}

TEST_CASE("without occlusion every instance keeps its full rasterized shape") {
  // Each instance's pixels form one shape of its class: rasterizing the class
  // shape from the instance's bounding box reproduces it for squares.
  SceneSpec spec;
  spec.num_classes = 8;
  for (std::uint64_t i = 0; i < 300; ++i) {
    const SceneSample s = generate_indexed_scene(spec, 11, i);
    for (const auto& [id, cls] : s.labels) {
      if (class_shape(cls) != ShapeKind::Square) continue;
      std::size_t x0 = 32, y0 = 32, x1 = 0, y1 = 0, n = 0;
      for (std::size_t p = 0; p < 32 * 32; ++p) {
        if (s.instance_map[p] != id) continue;
        x0 = std::min(x0, p % 32), x1 = std::max(x1, p % 32);
        y0 = std::min(y0, p / 32), y1 = std::max(y1, p / 32);
        ++n;
      }
      CHECK(n == (x1 - x0 + 1) * (y1 - y0 + 1));  // a full, unoccluded rectangle
    }
  }
}

TEST_CASE("scene generation is deterministic per seed and index") {
  SceneSpec spec;
  const SceneSample a = generate_indexed_scene(spec, 5, 17);
  const SceneSample b = generate_indexed_scene(spec, 5, 17);
  CHECK(a.image == b.image);
  CHECK(a.instance_map == b.instance_map);
  CHECK(a.labels == b.labels);
  CHECK(a.id == "000017");
  const SceneSample c = generate_indexed_scene(spec, 5, 18);
  CHECK_FALSE(a.image == c.image);
}

TEST_CASE("unsatisfiable and invalid specs are rejected") {
  SceneSpec spec;
  spec.size_min = 0.02;
  spec.size_max = 0.05;  // at most ~2 px across, never 16 visible pixels
  Rng rng(1);
  CHECK_THROWS_AS(generate_scene(spec, rng), std::runtime_error);
  spec = SceneSpec{};
  spec.min_objects = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SceneSpec{};
  spec.size_max = 1.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("dataset write and read round-trip") {
  TempDir dir("odis_data_rt");
  SceneSpec spec;
  std::vector<SceneSample> samples;
  for (std::size_t i = 0; i < 12; ++i) samples.push_back(generate_indexed_scene(spec, 2, i));
  const DatasetManifest m = write_dataset(samples, dir.path);
  CHECK(m.entries.size() == 12);
  CHECK(read_manifest(dir.path).entries.size() == 12);
  const auto back = read_dataset(dir.path, 8);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].id == samples[i].id);
    CHECK(back[i].image == samples[i].image);
    CHECK(back[i].instance_map == samples[i].instance_map);
    CHECK(back[i].labels == samples[i].labels);
  }
  // Manifest header and one row per sample.
  std::ifstream tsv(dir.path / "manifest.tsv");
  std::string header;
  std::getline(tsv, header);
  CHECK(header == "id\timage_path\tmask_path\tlabels");
}

TEST_CASE("netpbm encoding details") {
  TempDir dir("odis_data_pnm");
  write_pgm(dir.path / "zero.pgm", 3, 2, std::vector<std::uint8_t>(6, 0));
  CHECK(file_bytes(dir.path / "zero.pgm") == std::string("P5\n3 2\n255\n") + std::string(6, '\0'));
  std::size_t w = 0, h = 0;
  const auto px = read_pgm(dir.path / "zero.pgm", w, h);
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(pixels(px) == 0);

  Tensor<float> img({3, 2, 2});
  for (std::size_t i = 0; i < 12; ++i) img[i] = float(i * 20) / 255.0f;
  write_ppm(dir.path / "a.ppm", img);
  const std::string bytes = file_bytes(dir.path / "a.ppm");
  CHECK(bytes.substr(0, 11) == "P6\n2 2\n255\n");
  // Interleaved RGB: pixel 0 = (c0[0], c1[0], c2[0]).
  CHECK(std::uint8_t(bytes[11]) == 0);
  CHECK(std::uint8_t(bytes[12]) == 80);
  CHECK(std::uint8_t(bytes[13]) == 160);
  CHECK(read_ppm(dir.path / "a.ppm") == img);

  // Headers with comments are accepted.
  std::ofstream(dir.path / "c.pgm", std::ios::binary) << "P5 # c\n2 1\n255\n" << '\x01' << '\x02';
  const auto c = read_pgm(dir.path / "c.pgm", w, h);
  CHECK(c == std::vector<std::uint8_t>{1, 2});
}

TEST_CASE("malformed files name the file and byte offset") {
  TempDir dir("odis_data_bad");
  auto expect = [&](const std::string& name, const std::string& content, const std::string& at) {
    std::ofstream(dir.path / name, std::ios::binary) << content;
    std::size_t w, h;
    try {
      read_pgm(dir.path / name, w, h);
      FAIL("accepted " << name);
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find(name) != std::string::npos);
      CHECK(msg.find("byte " + at) != std::string::npos);
    }
  };
  expect("magic.pgm", "P6\n1 1\n255\n\x01", "0");
  expect("maxval.pgm", "P5\n1 1\n65535\n\x01\x01", "7");
  expect("short.pgm", "P5\n4 4\n255\n\x01", "12");
  expect("dims.pgm", "P5\nx 4\n255\n", "3");
}

TEST_CASE("label tables parse and reject garbage") {
  CHECK(parse_labels("1:3;2:0") == std::map<int, int>{{1, 3}, {2, 0}});
  CHECK(format_labels({{1, 3}, {2, 0}}) == "1:3;2:0");
  CHECK_THROWS(parse_labels("1-3"));
  CHECK_THROWS(parse_labels("0:3"));
}

TEST_CASE("reading rejects classes beyond the declared count") {
  TempDir dir("odis_data_cls");
  SceneSpec spec;
  spec.num_classes = 20;
  std::vector<SceneSample> samples;
  for (std::size_t i = 0; i < 30; ++i) samples.push_back(generate_indexed_scene(spec, 4, i));
  write_dataset(samples, dir.path);
  CHECK_NOTHROW(read_dataset(dir.path, 20));
  CHECK_THROWS(read_dataset(dir.path, 2));
}

TEST_CASE("split examples") {
  std::vector<int> labels(1000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = int(i % 8);
  const Split s = split_indices(labels, 0.8, 3);
  CHECK(s.train.size() == 800);
  CHECK(s.val.size() == 200);
  const Split t = split_indices(labels, 0.8, 3);
  CHECK(s.train == t.train);
  CHECK(s.val == t.val);
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.val.begin(), s.val.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expected(1000);
  std::iota(expected.begin(), expected.end(), 0);
  CHECK(all == expected);
  CHECK_FALSE(split_indices(labels, 0.8, 4).train == s.train);
  CHECK_THROWS_AS(split_indices(labels, 1.0, 0), std::invalid_argument);
  CHECK_THROWS_AS(split_indices(labels, 0.0, 0), std::invalid_argument);
}

TEST_CASE("split is class-balanced within one sample per class") {
  Rng rng(5);
  std::vector<int> labels(777);
  for (int& l : labels) l = int(uniform_index(rng, 6));
  const double f = 0.875;
  const Split s = split_indices(labels, f, 1);
  std::map<int, std::size_t> total, train;
  for (int l : labels) ++total[l];
  for (std::size_t i : s.train) ++train[labels[i]];
  for (const auto& [cls, n] : total)
    CHECK(std::abs(double(train[cls]) - f * double(n)) <= 1.0);
  CHECK(s.train.size() == std::size_t(std::llround(f * 777)));
}

}  // TEST_SUITE
