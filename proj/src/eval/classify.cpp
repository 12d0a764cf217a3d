#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "odis/eval.hpp"
#include "odis/rng.hpp"

namespace odis {

namespace {

int argmax_smallest(const std::vector<double>& scores) {
  int best = 0;
  for (std::size_t c = 1; c < scores.size(); ++c)
    if (scores[c] > scores[best]) best = int(c);
  return best;
}

std::size_t class_count(const std::vector<int>& a, const std::vector<int>& b = {}) {
  int hi = -1;
  for (int v : a) hi = std::max(hi, v);
  for (int v : b) hi = std::max(hi, v);
  return std::size_t(hi + 1);
}

}  // namespace

std::vector<int> knn_classify(const FeatureTable& train, const Tensor<float>& queries,
                              std::size_t k, double tau) {
  if (train.rows() == 0) throw std::invalid_argument("knn: empty training table");
  if (k == 0 || k > train.rows()) {
    throw std::invalid_argument("knn: k=" + std::to_string(k) + " with " +
                                std::to_string(train.rows()) + " training rows");
  }
  if (queries.cols() != train.dim()) {
    throw std::invalid_argument("knn: query dim " + std::to_string(queries.cols()) +
                                " vs table dim " + std::to_string(train.dim()));
  }
  const Tensor<float> keys = l2_normalize_rows(train.features);
  const Tensor<float> q = l2_normalize_rows(queries);
  const std::size_t classes = class_count(train.labels);
  std::vector<int> out(q.rows());
  std::vector<double> sims(keys.rows());
  std::vector<std::size_t> order(keys.rows());
  for (std::size_t r = 0; r < q.rows(); ++r) {
    const auto qr = q.row_span(r);
    for (std::size_t i = 0; i < keys.rows(); ++i) {
      const auto kr = keys.row_span(i);
      double s = 0.0;
      for (std::size_t d = 0; d < kr.size(); ++d) s += double(qr[d]) * double(kr[d]);
      sims[i] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return sims[a] != sims[b] ? sims[a] > sims[b] : a < b;
                      });
    std::vector<double> votes(classes, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      votes[train.labels[order[j]]] += std::exp(sims[order[j]] / tau);
    }
    out[r] = argmax_smallest(votes);
  }
  return out;
}

double knn_accuracy(const FeatureTable& train, const FeatureTable& val, std::size_t k,
                    double tau) {
  if (val.rows() == 0) throw std::invalid_argument("knn: empty validation table");
  const auto pred = knn_classify(train, val.features, k, tau);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == val.labels[i] ? 1 : 0;
  return double(hit) / double(pred.size());
}

LinearProbeResult linear_probe(const FeatureTable& train, const FeatureTable& val,
                               const LinearProbeConfig& config) {
  using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (train.rows() == 0 || val.rows() == 0) {
    throw std::invalid_argument("linear probe: empty split");
  }
  if (train.dim() != val.dim()) throw std::invalid_argument("linear probe: dim mismatch");
  const std::size_t n = train.rows(), d = train.dim();
  const std::size_t classes = class_count(train.labels, val.labels);

  // Standardize with training statistics.
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += train.features(r, c);
  for (double& m : mean) m /= double(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double v = train.features(r, c) - mean[c];
      sd[c] += v * v;
    }
  for (double& s : sd) s = std::sqrt(s / double(n)) + 1e-6;
  auto standardize = [&](const FeatureTable& t) {
    MatD x(t.rows(), d);
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) x(r, c) = (t.features(r, c) - mean[c]) / sd[c];
    return x;
  };
  const MatD xt = standardize(train), xv = standardize(val);

  LinearProbeResult result;
  for (std::size_t li = 0; li < config.lrs.size(); ++li) {
    const double lr = config.lrs[li];
    MatD w = MatD::Zero(d, classes), vw = MatD::Zero(d, classes);
    Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(classes), vb = b;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      Rng rng(derive_seed({config.seed, epoch}));
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
        const std::size_t m = std::min(config.batch_size, n - begin);
        MatD xb(m, d);
        for (std::size_t i = 0; i < m; ++i) xb.row(i) = xt.row(order[begin + i]);
        MatD logits = xb * w;
        logits.rowwise() += b;
        for (std::size_t i = 0; i < m; ++i) {
          const double mx = logits.row(i).maxCoeff();
          logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
          logits.row(i) /= logits.row(i).sum();
          logits(i, train.labels[order[begin + i]]) -= 1.0;
        }
        logits /= double(m);
        const MatD gw = xb.transpose() * logits;
        const Eigen::RowVectorXd gb = logits.colwise().sum();
        vw = config.momentum * vw + gw;
        vb = config.momentum * vb + gb;
        w -= lr * vw;
        b -= lr * vb;
      }
    }
    MatD scores = xv * w;
    scores.rowwise() += b;
    std::size_t hit = 0;
    for (std::size_t r = 0; r < val.rows(); ++r) {
      std::vector<double> s(classes);
      for (std::size_t c = 0; c < classes; ++c) s[c] = scores(r, c);
      hit += argmax_smallest(s) == val.labels[r] ? 1 : 0;
    }
    const double acc = double(hit) / double(val.rows());
    result.accuracies.push_back(acc);
    if (li == 0 || acc > result.best_accuracy) {
      result.best_accuracy = acc;
      result.best_lr = lr;
    }
  }
  return result;
}

}  // namespace odis
