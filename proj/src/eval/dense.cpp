#include <algorithm>
#include <cmath>
#include <numeric>

#include "odis/eval.hpp"

namespace odis {

std::vector<std::uint8_t> pixel_classes(const SceneSample& sample,
                                        const std::vector<std::uint8_t>& seg) {
  std::vector<std::uint8_t> out(seg.size(), 0);
  for (std::size_t i = 0; i < seg.size(); ++i) {
    if (!seg[i]) continue;
    auto it = sample.labels.find(seg[i]);
    if (it == sample.labels.end()) {
      throw std::invalid_argument("sample " + sample.id + ": instance " +
                                  std::to_string(seg[i]) + " has no label");
    }
    out[i] = static_cast<std::uint8_t>(it->second + 1);
  }
  return out;
}

Tensor<float> patch_soft_labels(const std::vector<std::uint8_t>& classes, std::size_t side,
                                std::size_t patch_size, std::size_t num_classes) {
  if (side % patch_size || classes.size() != side * side) {
    throw std::invalid_argument("patch labels: raster does not tile into patches");
  }
  const std::size_t grid = side / patch_size;
  Tensor<float> out = Tensor<float>::matrix(grid * grid, num_classes);
  const float share = 1.0f / float(patch_size * patch_size);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t c = classes[y * side + x];
      if (c >= num_classes) {
        throw std::invalid_argument("patch labels: class " + std::to_string(c) +
                                    " outside " + std::to_string(num_classes));
      }
      out((y / patch_size) * grid + x / patch_size, c) += share;
    }
  return out;
}

MemoryBank build_memory_bank(const ModelParams<float>& params, const ViTConfig& config,
                             const std::vector<SceneSample>& data,
                             const std::vector<std::size_t>& indices, std::size_t factor,
                             std::size_t cap, std::size_t num_classes, std::ostream* log) {
  if (factor == 0) throw std::invalid_argument("memory bank: factor must be positive");
  if (log && factor != 1 && factor != 8 && factor != 64 && factor != 128) {
    *log << "memory bank: unusual subsample factor " << factor << '\n';
  }
  MemoryBank bank;
  bank.factor = factor;
  bank.cap = cap;
  if (indices.empty()) return bank;
  std::vector<Tensor<float>> images;
  std::vector<Tensor<float>> soft;
  for (std::size_t idx : indices) {
    Tensor<float> image;
    std::vector<std::uint8_t> seg;
    center_view(data.at(idx), config.image_side, image, seg);
    soft.push_back(patch_soft_labels(pixel_classes(data[idx], seg), config.image_side,
                                     config.patch_size, num_classes));
    images.push_back(std::move(image));
  }
  const Encoded enc = encode_images(params, config, images, {});
  const Tensor<float> keys = l2_normalize_rows(enc.patches);
  const std::size_t hw = config.num_patches(), d = config.embed_dim;

  std::vector<float> kept_keys, kept_labels;
  std::size_t kept = 0;
  for (std::size_t row = 0; row < keys.rows(); row += factor) {
    if (cap && kept == cap) break;
    const auto k = keys.row_span(row);
    const auto l = soft[row / hw].row_span(row % hw);
    kept_keys.insert(kept_keys.end(), k.begin(), k.end());
    kept_labels.insert(kept_labels.end(), l.begin(), l.end());
    ++kept;
  }
  bank.keys = Tensor<float>::matrix(kept, d, std::move(kept_keys));
  bank.labels = Tensor<float>::matrix(kept, num_classes, std::move(kept_labels));
  return bank;
}

Tensor<float> dense_retrieve(const Tensor<float>& queries, const MemoryBank& bank,
                             std::size_t k, double temperature) {
  if (bank.rows() == 0) throw std::invalid_argument("dense retrieval: empty memory bank");
  if (k == 0 || k > bank.rows()) {
    throw std::invalid_argument("dense retrieval: k=" + std::to_string(k) + " with " +
                                std::to_string(bank.rows()) + " bank rows");
  }
  if (queries.cols() != bank.keys.cols()) {
    throw std::invalid_argument("dense retrieval: query dim " +
                                std::to_string(queries.cols()) + " vs bank dim " +
                                std::to_string(bank.keys.cols()));
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("dense retrieval: temperature <= 0");
  const Tensor<float> q = l2_normalize_rows(queries);
  const std::size_t classes = bank.labels.cols();
  Tensor<float> out = Tensor<float>::matrix(q.rows(), classes);
  std::vector<double> sims(bank.rows());
  std::vector<std::size_t> order(bank.rows());
  std::vector<double> w(k), acc(classes);
  for (std::size_t r = 0; r < q.rows(); ++r) {
    const auto qr = q.row_span(r);
    for (std::size_t i = 0; i < bank.rows(); ++i) {
      const auto kr = bank.keys.row_span(i);
      double s = 0.0;
      for (std::size_t d = 0; d < kr.size(); ++d) s += double(qr[d]) * double(kr[d]);
      sims[i] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return sims[a] != sims[b] ? sims[a] > sims[b] : a < b;
                      });
    const double top = sims[order[0]];
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      w[j] = std::exp((sims[order[j]] - top) / temperature);
      z += w[j];
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const auto lab = bank.labels.row_span(order[j]);
      for (std::size_t c = 0; c < classes; ++c) acc[c] += (w[j] / z) * double(lab[c]);
    }
    for (std::size_t c = 0; c < classes; ++c) out(r, c) = float(acc[c]);
  }
  return out;
}

Tensor<float> upsample_bilinear(const Tensor<float>& map, std::size_t h, std::size_t w,
                                std::size_t out_h, std::size_t out_w) {
  if (map.rows() != h * w) {
    throw std::invalid_argument("upsample: map has " + std::to_string(map.rows()) +
                                " cells, expected " + std::to_string(h * w));
  }
  if (out_h < h || out_w < w) throw std::invalid_argument("upsample: output smaller than input");
  const std::size_t classes = map.cols();
  struct Tap {
    std::size_t lo, hi;
    double t;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> v(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double s = std::clamp((double(o) + 0.5) * double(in) / double(out) - 0.5, 0.0,
                                  double(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(s));
      v[o] = {lo, std::min(lo + 1, in - 1), s - double(lo)};
    }
    return v;
  };
  const auto ty = taps(h, out_h), tx = taps(w, out_w);
  Tensor<float> out = Tensor<float>::matrix(out_h * out_w, classes);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const Tap& y = ty[oy];
      const Tap& x = tx[ox];
      for (std::size_t c = 0; c < classes; ++c) {
        const double top = map(y.lo * w + x.lo, c) * (1.0 - x.t) + map(y.lo * w + x.hi, c) * x.t;
        const double bot = map(y.hi * w + x.lo, c) * (1.0 - x.t) + map(y.hi * w + x.hi, c) * x.t;
        out(oy * out_w + ox, c) = float(top * (1.0 - y.t) + bot * y.t);
      }
    }
  return out;
}

std::vector<std::uint8_t> argmax_rows(const Tensor<float>& map) {
  std::vector<std::uint8_t> out(map.rows());
  for (std::size_t r = 0; r < map.rows(); ++r) {
    const auto row = map.row_span(r);
    out[r] = static_cast<std::uint8_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

IouAccumulator::IouAccumulator(std::size_t num_classes)
    : inter(num_classes, 0), uni(num_classes, 0) {}

void IouAccumulator::add(const std::vector<std::uint8_t>& pred,
                         const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("miou: prediction has " + std::to_string(pred.size()) +
                                " cells, ground truth " + std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= inter.size() || gt[i] >= inter.size()) {
      throw std::invalid_argument("miou: class id outside " + std::to_string(inter.size()));
    }
    if (pred[i] == gt[i]) {
      ++inter[pred[i]];
      ++uni[pred[i]];
    } else {
      ++uni[pred[i]];
      ++uni[gt[i]];
    }
  }
}

double IouAccumulator::miou() const {
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < inter.size(); ++c) {
    if (!uni[c]) continue;
    sum += double(inter[c]) / double(uni[c]);
    ++present;
  }
  return present ? sum / double(present) : 0.0;
}

double miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
            std::size_t num_classes) {
  IouAccumulator acc(num_classes);
  acc.add(pred, gt);
  return acc.miou();
}

double dense_miou(const ModelParams<float>& params, const ViTConfig& config,
                  const MemoryBank& bank, const std::vector<SceneSample>& data,
                  const std::vector<std::size_t>& query, std::size_t k,
                  double temperature, std::size_t num_classes) {
  IouAccumulator acc(num_classes);
  if (query.empty()) return 0.0;
  std::vector<Tensor<float>> images;
  std::vector<std::vector<std::uint8_t>> gts;
  for (std::size_t idx : query) {
    Tensor<float> image;
    std::vector<std::uint8_t> seg;
    center_view(data.at(idx), config.image_side, image, seg);
    gts.push_back(pixel_classes(data[idx], seg));
    images.push_back(std::move(image));
  }
  const Encoded enc = encode_images(params, config, images, {});
  const std::size_t hw = config.num_patches(), d = config.embed_dim, g = config.grid();
  for (std::size_t i = 0; i < query.size(); ++i) {
    Tensor<float> q = Tensor<float>::matrix(hw, d);
    std::copy(enc.patches.data() + i * hw * d, enc.patches.data() + (i + 1) * hw * d, q.data());
    const Tensor<float> soft = dense_retrieve(q, bank, k, temperature);
    const Tensor<float> up =
        upsample_bilinear(soft, g, g, config.image_side, config.image_side);
    acc.add(argmax_rows(up), gts[i]);
  }
  return acc.miou();
}

}  // namespace odis
