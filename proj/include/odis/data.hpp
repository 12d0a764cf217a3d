#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "odis/rng.hpp"
#include "odis/tensor.hpp"

namespace odis {

/// One scene: RGB image, instance raster and per-instance class labels.
struct SceneSample {
  std::string id;
  Tensor<float> image;                     // [3 x S x S], values k / 255
  std::vector<std::uint8_t> instance_map;  // S * S, 0 = background
  std::map<int, int> labels;               // instance id -> class id
  /// False emulates a sample shipped without a segmentation map; the
  /// target object is then taken to cover the whole image.
  bool has_mask = true;

  std::size_t side() const { return image.empty() ? 0 : image.dim(1); }
  /// Class of instance 1, the designated primary object.
  int primary_class() const;
  /// Pixel count per instance id.
  std::map<int, std::size_t> instance_areas() const;
  /// Throws unless map ids and label ids agree and the raster fits the image.
  void validate() const;
};

enum class ShapeKind { Disk, Square, Triangle, Ring, Cross };
enum class Background { Flat, Gradient, Noise, Mixed };

struct SceneSpec {
  std::size_t canvas_side = 32;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::size_t num_classes = 8;
  double size_min = 0.25;  // object diameter as a fraction of the canvas
  double size_max = 0.5;
  bool occlusion = false;
  Background background = Background::Mixed;
  std::size_t min_visible_pixels = 16;
  std::size_t max_place_attempts = 50;

  void validate() const;
};

inline constexpr std::size_t kMaxClasses = 20;

/// Shape and palette index of a class: shape = c mod 5, color = c mod 4,
/// unique for c < 20.
ShapeKind class_shape(int class_id);
int class_color(int class_id);

/// Pixel-center rasterization of a shape of the given diameter.
std::vector<std::uint8_t> rasterize(ShapeKind kind, double cx, double cy,
                                    double diameter, std::size_t side);

SceneSample generate_scene(const SceneSpec& spec, Rng& rng);

/// Scene `index` of a dataset generated with `seed`; independent of any
/// other index.
SceneSample generate_indexed_scene(const SceneSpec& spec, std::uint64_t seed,
                                   std::size_t index);

struct ManifestEntry {
  std::string id;
  std::string image_path;  // relative to the dataset directory
  std::string mask_path;
  std::map<int, int> labels;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

/// Binary PPM (P6) / PGM (P5) with maxval 255.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, std::size_t width,
               std::size_t height, const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path,
                                   std::size_t& width, std::size_t& height);

std::string format_labels(const std::map<int, int>& labels);
std::map<int, int> parse_labels(const std::string& text);

DatasetManifest write_dataset(const std::vector<SceneSample>& samples,
                              const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);
/// Reads every sample; `num_classes` > 0 additionally bounds class ids.
std::vector<SceneSample> read_dataset(const std::filesystem::path& dir,
                                      std::size_t num_classes = 0);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Deterministic shuffled split of sample indices, stratified on the given
/// per-sample labels so each class lands within one sample of its quota.
Split split_indices(const std::vector<int>& labels, double train_fraction,
                    std::uint64_t seed);
Split split(const DatasetManifest& manifest, double train_fraction,
            std::uint64_t seed);

}  // namespace odis
