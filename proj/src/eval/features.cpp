#include <algorithm>
#include <cmath>

#include "odis/augment.hpp"
#include "odis/eval.hpp"

namespace odis {

Encoded encode_images(const ModelParams<float>& params, const ViTConfig& config,
                      const std::vector<Tensor<float>>& images,
                      const std::vector<std::vector<std::uint8_t>>& obj_masks,
                      std::size_t chunk) {
  if (!obj_masks.empty() && obj_masks.size() != images.size()) {
    throw std::invalid_argument("encode: " + std::to_string(obj_masks.size()) +
                                " masks for " + std::to_string(images.size()) + " images");
  }
  if (images.empty()) throw std::invalid_argument("encode: no images");
  const std::size_t hw = config.num_patches(), d = config.embed_dim, pd = config.patch_dim();
  Encoded out{Tensor<float>::matrix(images.size(), d),
              Tensor<float>::matrix(images.size() * hw, d)};
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, images.size() - begin);
    ViewBatch<float> batch;
    batch.count = n;
    batch.grid = config.grid();
    batch.patches = Tensor<float>::matrix(n * hw, pd);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor<float> p = patchify(images[begin + i], config.patch_size);
      std::copy(p.data(), p.data() + p.size(), batch.patches.data() + i * hw * pd);
      if (!obj_masks.empty()) {
        const auto& m = obj_masks[begin + i];
        batch.obj_mask.insert(batch.obj_mask.end(), m.begin(), m.end());
      }
    }
    Graph<float> g(false);
    const BoundParams p = BoundParams::bind(g, params, false);
    const BackboneOutput o = backbone_forward(g, p, config, batch);
    const Tensor<float>& obj = g.value(o.obj);
    const Tensor<float>& patches = g.value(o.patches);
    std::copy(obj.data(), obj.data() + obj.size(), out.obj.data() + begin * d);
    std::copy(patches.data(), patches.data() + patches.size(),
              out.patches.data() + begin * hw * d);
  }
  return out;
}

void center_view(const SceneSample& sample, std::size_t side, Tensor<float>& image,
                 std::vector<std::uint8_t>& seg) {
  const std::size_t s = sample.side();
  if (s == side) {
    image = sample.image;
    seg = sample.instance_map;
    return;
  }
  View v = apply_crop(sample.image, sample.instance_map, CropBox{0, 0, s, s, false}, side);
  image = std::move(v.image);
  seg = std::move(v.seg);
}

std::vector<std::uint8_t> primary_object_mask(const SceneSample& sample,
                                              const ViTConfig& config, bool* fell_back) {
  if (fell_back) *fell_back = false;
  std::vector<std::uint8_t> ones(config.num_patches(), 1);
  if (!sample.has_mask) return ones;
  Tensor<float> image;
  std::vector<std::uint8_t> seg;
  center_view(sample, config.image_side, image, seg);
  auto m = patchify_mask(seg, config.image_side, 1, config.patch_size);
  if (std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) {
    if (fell_back) *fell_back = true;
    return ones;
  }
  return m;
}

FeatureTable extract_features(const ModelParams<float>& params, const ViTConfig& config,
                              const std::vector<SceneSample>& data,
                              const std::vector<std::size_t>& indices, bool use_masks,
                              std::ostream* log) {
  FeatureTable t;
  t.mode = use_masks ? FeatureMode::MaskedObj : FeatureMode::UnmaskedObj;
  if (indices.empty()) return t;
  std::vector<Tensor<float>> images;
  std::vector<std::vector<std::uint8_t>> masks;
  for (std::size_t idx : indices) {
    const SceneSample& s = data.at(idx);
    Tensor<float> image;
    std::vector<std::uint8_t> seg;
    center_view(s, config.image_side, image, seg);
    images.push_back(std::move(image));
    if (use_masks) {
      bool fell_back = false;
      masks.push_back(primary_object_mask(s, config, &fell_back));
      if (fell_back && log) {
        *log << "sample " << s.id << ": primary object mask empty, using the whole image\n";
      }
    }
    t.ids.push_back(s.id);
    t.labels.push_back(s.primary_class());
  }
  t.features = encode_images(params, config, images, masks).obj;
  return t;
}

Tensor<float> l2_normalize_rows(const Tensor<float>& x) {
  Tensor<float> out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double sq = 0.0;
    for (float v : x.row_span(r)) sq += double(v) * double(v);
    const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
    for (float& v : out.row_span(r)) v = float(double(v) * inv);
  }
  return out;
}

std::vector<Record> feature_records(const FeatureTable& table) {
  std::vector<Record> out;
  for (std::size_t r = 0; r < table.rows(); ++r) {
    const auto row = table.features.row_span(r);
    out.push_back({"feat/" + table.ids[r],
                   Tensor<float>::row(std::vector<float>(row.begin(), row.end()))});
    out.push_back({"label/" + table.ids[r], Tensor<float>::row({float(table.labels[r])})});
  }
  return out;
}

void write_features(const std::filesystem::path& path, const FeatureTable& table) {
  write_records(path, feature_records(table));
}

}  // namespace odis
