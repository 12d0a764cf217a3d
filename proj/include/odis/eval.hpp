#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "odis/checkpoint.hpp"
#include "odis/data.hpp"
#include "odis/tensor.hpp"
#include "odis/vit.hpp"

namespace odis {

enum class FeatureMode { MaskedObj, UnmaskedObj };

/// Frozen [OBJ] features of a set of samples.
struct FeatureTable {
  std::vector<std::string> ids;
  Tensor<float> features;  // [rows x D], raw backbone outputs
  std::vector<int> labels;
  FeatureMode mode = FeatureMode::UnmaskedObj;

  std::size_t rows() const { return ids.size(); }
  std::size_t dim() const { return features.empty() ? 0 : features.cols(); }
};

/// Frozen forward of a list of images (each [C x S x S], S = model side).
/// obj_masks may be empty (no restriction) or hold one grid^2 mask per image.
struct Encoded {
  Tensor<float> obj;      // [n x D]
  Tensor<float> patches;  // [n * HW x D]
};
Encoded encode_images(const ModelParams<float>& params, const ViTConfig& config,
                      const std::vector<Tensor<float>>& images,
                      const std::vector<std::vector<std::uint8_t>>& obj_masks,
                      std::size_t chunk = 64);

/// Center crop + resize of a sample to the model side, image and instance map.
void center_view(const SceneSample& sample, std::size_t side, Tensor<float>& image,
                 std::vector<std::uint8_t>& seg);

/// Patch mask of the primary object (instance 1) of a sample at model
/// resolution; all-ones when the sample has no mask or the object vanished.
std::vector<std::uint8_t> primary_object_mask(const SceneSample& sample,
                                              const ViTConfig& config, bool* fell_back);

FeatureTable extract_features(const ModelParams<float>& params, const ViTConfig& config,
                              const std::vector<SceneSample>& data,
                              const std::vector<std::size_t>& indices, bool use_masks,
                              std::ostream* log = nullptr);

/// Row-wise x / max(||x||, 1e-12), accumulated in double.
Tensor<float> l2_normalize_rows(const Tensor<float>& x);

/// Weighted k-NN vote: cosine similarity, weight exp(sim / tau), ties to the
/// smallest class id.
std::vector<int> knn_classify(const FeatureTable& train, const Tensor<float>& queries,
                              std::size_t k, double tau = 0.07);
double knn_accuracy(const FeatureTable& train, const FeatureTable& val, std::size_t k,
                    double tau = 0.07);

struct LinearProbeConfig {
  std::vector<double> lrs = {0.001, 0.01, 0.1};
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct LinearProbeResult {
  double best_accuracy = 0.0;
  double best_lr = 0.0;
  std::vector<double> accuracies;  // one per lr
};

/// Softmax regression on standardized frozen features, one run per lr.
LinearProbeResult linear_probe(const FeatureTable& train, const FeatureTable& val,
                               const LinearProbeConfig& config);

struct MemoryBank {
  Tensor<float> keys;    // [rows x D], L2-normalized
  Tensor<float> labels;  // [rows x classes], rows sum to 1
  std::size_t factor = 1;
  std::size_t cap = 0;   // 0 = unbounded

  std::size_t rows() const { return keys.empty() ? 0 : keys.rows(); }
};

/// Per-pixel class raster of a sample: 0 background, class + 1 for objects.
std::vector<std::uint8_t> pixel_classes(const SceneSample& sample,
                                        const std::vector<std::uint8_t>& seg);

/// Average-pooled one-hot pixel labels per patch: [HW x classes].
Tensor<float> patch_soft_labels(const std::vector<std::uint8_t>& classes, std::size_t side,
                                std::size_t patch_size, std::size_t num_classes);

/// Keeps every factor-th patch in (image, patch) order, truncated at cap.
MemoryBank build_memory_bank(const ModelParams<float>& params, const ViTConfig& config,
                             const std::vector<SceneSample>& data,
                             const std::vector<std::size_t>& indices, std::size_t factor,
                             std::size_t cap, std::size_t num_classes,
                             std::ostream* log = nullptr);

/// Top-k cosine neighbors (ties to the lower bank row), softmax(sim / temp)
/// weights, weighted sum of their soft labels. Returns [queries x classes].
Tensor<float> dense_retrieve(const Tensor<float>& queries, const MemoryBank& bank,
                             std::size_t k, double temperature = 0.07);

/// [h*w x C] map -> [out_h*out_w x C], half-pixel centers, edge clamped.
Tensor<float> upsample_bilinear(const Tensor<float>& map, std::size_t h, std::size_t w,
                                std::size_t out_h, std::size_t out_w);

std::vector<std::uint8_t> argmax_rows(const Tensor<float>& map);

/// Intersection / union counts per class, summed over images.
struct IouAccumulator {
  explicit IouAccumulator(std::size_t num_classes);
  void add(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);
  /// Mean IoU over classes present in prediction or ground truth.
  double miou() const;

  std::vector<std::uint64_t> inter, uni;
};

double miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
            std::size_t num_classes);

/// Dense retrieval segmentation of `query` samples against a bank.
double dense_miou(const ModelParams<float>& params, const ViTConfig& config,
                  const MemoryBank& bank, const std::vector<SceneSample>& data,
                  const std::vector<std::size_t>& query, std::size_t k,
                  double temperature, std::size_t num_classes);

/// FeatureTable as checkpoint records "feat/<id>" and "label/<id>".
std::vector<Record> feature_records(const FeatureTable& table);
void write_features(const std::filesystem::path& path, const FeatureTable& table);

}  // namespace odis
