#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "odis/data.hpp"

namespace odis {

Split split_indices(const std::vector<int>& labels, double train_fraction,
                    std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split: train fraction must be in (0, 1)");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  const auto total_train = static_cast<std::size_t>(
      std::llround(train_fraction * double(labels.size())));
  // Floor quotas first, then hand out the rest by largest remainder.
  std::vector<std::pair<double, int>> remainders;
  std::map<int, std::size_t> quota;
  std::size_t assigned = 0;
  for (const auto& [cls, idx] : by_class) {
    const double exact = train_fraction * double(idx.size());
    quota[cls] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[cls];
    remainders.push_back({exact - std::floor(exact), cls});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total_train && i < remainders.size(); ++i) {
    ++quota[remainders[i].second];
    ++assigned;
  }

  Rng rng(derive_seed({seed, 0x5b17}));
  Split out;
  for (auto& [cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t q = std::min(quota[cls], idx.size());
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<long>(q));
    out.val.insert(out.val.end(), idx.begin() + static_cast<long>(q), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

Split split(const DatasetManifest& manifest, double train_fraction,
            std::uint64_t seed) {
  std::vector<int> labels;
  labels.reserve(manifest.entries.size());
  for (const ManifestEntry& e : manifest.entries) {
    auto it = e.labels.find(1);
    labels.push_back(it == e.labels.end() ? -1 : it->second);
  }
  return split_indices(labels, train_fraction, seed);
}

}  // namespace odis
