#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

#include "odis/autograd.hpp"
#include "odis/kernels.hpp"

namespace odis::ops {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const Mat<T>>;
template <typename T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
CMapMat<T> view(const Tensor<T>& t) {
  return CMapMat<T>(t.data(), t.rows(), t.cols());
}
template <typename T>
MapMat<T> view(Tensor<T>& t) {
  return MapMat<T>(t.data(), t.rows(), t.cols());
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a) + " vs " + shape_str(b));
}

void require_matrix(const char* op, const Shape& s) {
  if (s.size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank-2 input, got " +
                                shape_str(s));
  }
}

// Masked logits use a large finite negative instead of -inf so that a row
// whose max is itself masked still normalizes.
constexpr double kMaskedLogit = -1e9;

}  // namespace

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require_matrix("matmul", av.shape());
  require_matrix("matmul", bv.shape());
  if (av.cols() != bv.rows()) shape_error("matmul", av.shape(), bv.shape());
  Tensor<T> out = kernels::matmul(av, bv);
  return g.record("matmul", std::move(out), {a, b},
                  [a, b](Graph<T>& g, const Tensor<T>& go) {
                    const auto G = view(go);
                    if (Tensor<T>* da = g.grad_buffer(a)) {
                      view(*da).noalias() += G * view(g.value(b)).transpose();
                    }
                    if (Tensor<T>* db = g.grad_buffer(b)) {
                      view(*db).noalias() += view(g.value(a)).transpose() * G;
                    }
                  });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var bias) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  require_matrix("linear", xv.shape());
  require_matrix("linear", wv.shape());
  if (xv.cols() != wv.rows()) shape_error("linear", xv.shape(), wv.shape());
  Tensor<T> out = Tensor<T>::matrix(xv.rows(), wv.cols());
  view(out).noalias() = view(xv) * view(wv);
  std::vector<Var> inputs{x, w};
  if (bias.valid()) {
    const Tensor<T>& bv = g.value(bias);
    if (bv.size() != wv.cols()) shape_error("linear bias", bv.shape(), wv.shape());
    view(out).rowwise() += CMapMat<T>(bv.data(), 1, bv.size()).row(0);
    inputs.push_back(bias);
  }
  return g.record("linear", std::move(out), std::move(inputs),
                  [x, w, bias](Graph<T>& g, const Tensor<T>& go) {
                    const auto G = view(go);
                    if (Tensor<T>* dx = g.grad_buffer(x)) {
                      view(*dx).noalias() += G * view(g.value(w)).transpose();
                    }
                    if (Tensor<T>* dw = g.grad_buffer(w)) {
                      view(*dw).noalias() += view(g.value(x)).transpose() * G;
                    }
                    if (bias.valid()) {
                      if (Tensor<T>* db = g.grad_buffer(bias)) {
                        MapMat<T>(db->data(), 1, db->size()) +=
                            G.colwise().sum();
                      }
                    }
                  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  if (av.shape() != bv.shape()) shape_error("add", av.shape(), bv.shape());
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record("add", std::move(out), {a, b},
                  [a, b](Graph<T>& g, const Tensor<T>& go) {
                    for (Var v : {a, b}) {
                      if (Tensor<T>* d = g.grad_buffer(v)) {
                        for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += go[i];
                      }
                    }
                  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  Tensor<T> out = g.value(a);
  for (T& v : out.values()) v *= factor;
  return g.record("scale", std::move(out), {a},
                  [a, factor](Graph<T>& g, const Tensor<T>& go) {
                    if (Tensor<T>* d = g.grad_buffer(a)) {
                      for (std::size_t i = 0; i < d->size(); ++i) {
                        (*d)[i] += factor * go[i];
                      }
                    }
                  });
}

template <typename T>
Var gelu(Graph<T>& g, Var x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Tensor<T>& xv = g.value(x);
  const auto n = static_cast<Eigen::Index>(xv.size());
  const T k = T(0.7978845608028654);  // sqrt(2 / pi)
  const T c = T(0.044715);
  const Eigen::Map<const Arr> v(xv.data(), n);
  // tanh is kept for the backward pass.
  auto t = std::make_shared<Arr>((k * (v + c * v * v * v)).tanh());
  Tensor<T> out(xv.shape());
  Eigen::Map<Arr>(out.data(), n) = T(0.5) * v * (T(1) + *t);
  return g.record("gelu", std::move(out), {x},
                  [x, t, n, k, c](Graph<T>& g, const Tensor<T>& go) {
                    Tensor<T>* dx = g.grad_buffer(x);
                    if (!dx) return;
                    const Eigen::Map<const Arr> v(g.value(x).data(), n);
                    const Eigen::Map<const Arr> gov(go.data(), n);
                    const Arr& th = *t;
                    Eigen::Map<Arr>(dx->data(), n) +=
                        (T(0.5) * (T(1) + th) +
                         T(0.5) * v * (T(1) - th * th) * k * (T(1) + T(3) * c * v * v)) *
                        gov;
                  });
}

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& gv = g.value(gamma);
  const Tensor<T>& bv = g.value(beta);
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gv.size() != d || bv.size() != d) {
    shape_error("layer_norm", xv.shape(), gv.shape());
  }
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row_span(r);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= T(d);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * inv;
      xhat(r, c) = h;
      out(r, c) = h * gv[c] + bv[c];
    }
  }
  return g.record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph<T>& g, const Tensor<T>& go) {
        const std::size_t n = xhat.rows(), d = xhat.cols();
        if (Tensor<T>* dg = g.grad_buffer(gamma)) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) (*dg)[c] += go(r, c) * xhat(r, c);
        }
        if (Tensor<T>* db = g.grad_buffer(beta)) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) (*db)[c] += go(r, c);
        }
        Tensor<T>* dx = g.grad_buffer(x);
        if (!dx) return;
        const Tensor<T>& gv = g.value(gamma);
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < n; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t c = 0; c < d; ++c) {
            dh[c] = go(r, c) * gv[c];
            mean_dh += dh[c];
            mean_dh_h += dh[c] * xhat(r, c);
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          for (std::size_t c = 0; c < d; ++c) {
            (*dx)(r, c) +=
                inv_std[r] * (dh[c] - mean_dh - xhat(r, c) * mean_dh_h);
          }
        }
      });
}

template <typename T>
Var softmax(Graph<T>& g, Var x, T temperature) {
  Tensor<T> out = kernels::softmax(g.value(x), temperature);
  return g.record("softmax", out, {x},
                  [x, y = out, temperature](Graph<T>& g, const Tensor<T>& go) {
                    Tensor<T>* dx = g.grad_buffer(x);
                    if (!dx) return;
                    const T inv_t = T(1) / temperature;
                    for (std::size_t r = 0; r < y.rows(); ++r) {
                      T dot = 0;
                      for (std::size_t c = 0; c < y.cols(); ++c) dot += go(r, c) * y(r, c);
                      for (std::size_t c = 0; c < y.cols(); ++c) {
                        (*dx)(r, c) += inv_t * y(r, c) * (go(r, c) - dot);
                      }
                    }
                  });
}

template <typename T>
Var l2_normalize(Graph<T>& g, Var x, T eps) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(xv.shape());
  std::vector<T> norms(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    T sq = 0;
    for (T v : xv.row_span(r)) sq += v * v;
    const T nrm = std::sqrt(sq);
    norms[r] = nrm;
    const T denom = std::max(nrm, eps);
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) = xv(r, c) / denom;
  }
  return g.record(
      "l2_normalize", out, {x},
      [x, y = out, norms = std::move(norms), eps](Graph<T>& g,
                                                  const Tensor<T>& go) {
        Tensor<T>* dx = g.grad_buffer(x);
        if (!dx) return;
        for (std::size_t r = 0; r < y.rows(); ++r) {
          if (norms[r] <= eps) {
            for (std::size_t c = 0; c < y.cols(); ++c) (*dx)(r, c) += go(r, c) / eps;
            continue;
          }
          T dot = 0;
          for (std::size_t c = 0; c < y.cols(); ++c) dot += go(r, c) * y(r, c);
          for (std::size_t c = 0; c < y.cols(); ++c) {
            (*dx)(r, c) += (go(r, c) - y(r, c) * dot) / norms[r];
          }
        }
      });
}

template <typename T>
Var cross_entropy_rows(Graph<T>& g, const Tensor<T>& targets, Var probs) {
  const Tensor<T>& pv = g.value(probs);
  if (targets.shape() != pv.shape()) {
    shape_error("cross_entropy", targets.shape(), pv.shape());
  }
  const T floor = T(kernels::kLogFloor);
  Tensor<T> out = Tensor<T>::matrix(pv.rows(), 1);
  for (std::size_t r = 0; r < pv.rows(); ++r) {
    out[r] = kernels::cross_entropy(targets.row_span(r), pv.row_span(r));
  }
  return g.record("cross_entropy", std::move(out), {probs},
                  [probs, targets, floor](Graph<T>& g, const Tensor<T>& go) {
                    Tensor<T>* dp = g.grad_buffer(probs);
                    if (!dp) return;
                    const Tensor<T>& pv = g.value(probs);
                    for (std::size_t r = 0; r < pv.rows(); ++r) {
                      for (std::size_t c = 0; c < pv.cols(); ++c) {
                        const T p = pv(r, c);
                        if (p > floor) (*dp)(r, c) -= go[r] * targets(r, c) / p;
                      }
                    }
                  });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  T total = 0;
  for (T v : g.value(x).values()) total += v;
  return g.record("sum", Tensor<T>::matrix(1, 1, total), {x},
                  [x](Graph<T>& g, const Tensor<T>& go) {
                    if (Tensor<T>* dx = g.grad_buffer(x)) {
                      for (T& v : dx->values()) v += go[0];
                    }
                  });
}

template <typename T>
Var weighted_sum(Graph<T>& g, Var x, std::vector<T> weights) {
  const Tensor<T>& xv = g.value(x);
  if (weights.size() != xv.size()) {
    throw std::invalid_argument("weighted_sum: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(xv.size()) +
                                " entries");
  }
  T total = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += weights[i] * xv[i];
  return g.record("weighted_sum", Tensor<T>::matrix(1, 1, total), {x},
                  [x, w = std::move(weights)](Graph<T>& g, const Tensor<T>& go) {
                    if (Tensor<T>* dx = g.grad_buffer(x)) {
                      for (std::size_t i = 0; i < w.size(); ++i) (*dx)[i] += w[i] * go[0];
                    }
                  });
}

template <typename T>
Var transpose(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  require_matrix("transpose", xv.shape());
  Tensor<T> out = Tensor<T>::matrix(xv.cols(), xv.rows());
  view(out) = view(xv).transpose();
  return g.record("transpose", std::move(out), {x},
                  [x](Graph<T>& g, const Tensor<T>& go) {
                    if (Tensor<T>* dx = g.grad_buffer(x)) view(*dx) += view(go).transpose();
                  });
}

template <typename T>
Var gather_rows(Graph<T>& g, Var x, std::vector<std::size_t> rows) {
  const Tensor<T>& xv = g.value(x);
  const std::size_t d = xv.cols();
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty row list");
  Tensor<T> out = Tensor<T>::matrix(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) {
      throw std::invalid_argument("gather_rows: row " + std::to_string(rows[i]) +
                                  " out of range for " + shape_str(xv.shape()));
    }
    std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  }
  return g.record("gather_rows", std::move(out), {x},
                  [x, rows = std::move(rows)](Graph<T>& g, const Tensor<T>& go) {
                    Tensor<T>* dx = g.grad_buffer(x);
                    if (!dx) return;
                    const std::size_t d = go.cols();
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                      T* dst = dx->data() + rows[i] * d;
                      const T* src = go.data() + i * d;
                      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                    }
                  });
}

template <typename T>
Var concat_rows(Graph<T>& g, const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t d = g.value(xs.front()).cols();
  std::size_t total = 0;
  for (Var v : xs) {
    if (g.value(v).cols() != d) {
      shape_error("concat_rows", g.value(xs.front()).shape(), g.value(v).shape());
    }
    total += g.value(v).rows();
  }
  Tensor<T> out = Tensor<T>::matrix(total, d);
  std::size_t offset = 0;
  for (Var v : xs) {
    const Tensor<T>& xv = g.value(v);
    std::copy(xv.values().begin(), xv.values().end(), out.data() + offset);
    offset += xv.size();
  }
  return g.record("concat_rows", std::move(out), xs,
                  [xs](Graph<T>& g, const Tensor<T>& go) {
                    std::size_t offset = 0;
                    for (Var v : xs) {
                      const std::size_t n = g.value(v).size();
                      if (Tensor<T>* dv = g.grad_buffer(v)) {
                        for (std::size_t i = 0; i < n; ++i) (*dv)[i] += go[offset + i];
                      }
                      offset += n;
                    }
                  });
}

template <typename T>
Var masked_attention(Graph<T>& g, Var qkv, std::size_t seq_len,
                     std::size_t heads, std::vector<std::uint8_t> key_mask,
                     Tensor<T>* probs_out) {
  const Tensor<T>& in = g.value(qkv);
  const std::size_t n = in.rows();
  if (in.cols() % 3 != 0 || seq_len == 0 || n % seq_len != 0) {
    throw std::invalid_argument("masked_attention: qkv shape " +
                                shape_str(in.shape()) +
                                " does not hold whole sequences of length " +
                                std::to_string(seq_len));
  }
  const std::size_t dim = in.cols() / 3;
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("masked_attention: dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (!key_mask.empty() && key_mask.size() != n) {
    throw std::invalid_argument("masked_attention: key mask has " +
                                std::to_string(key_mask.size()) +
                                " entries, expected " + std::to_string(n));
  }
  const std::size_t seqs = n / seq_len;
  const std::size_t dh = dim / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const Eigen::Index L = static_cast<Eigen::Index>(seq_len);
  const Eigen::Index stride = static_cast<Eigen::Index>(3 * dim);

  if (!key_mask.empty()) {
    for (std::size_t b = 0; b < seqs; ++b) {
      bool any = false;
      for (std::size_t j = 0; j < seq_len; ++j) any = any || key_mask[b * seq_len + j];
      if (!any) {
        throw std::invalid_argument("masked_attention: sequence " +
                                    std::to_string(b) +
                                    " has no key visible to token 0");
      }
    }
  }

  Tensor<T> out = Tensor<T>::matrix(n, dim);
  Tensor<T> probs({seqs * heads * seq_len, seq_len});
  Mat<T> scores(L, L);
  for (std::size_t b = 0; b < seqs; ++b) {
    const T* base = in.data() + b * seq_len * 3 * dim;
    for (std::size_t h = 0; h < heads; ++h) {
      CStridedMap<T> q(base + h * dh, L, dh, Eigen::OuterStride<>(stride));
      CStridedMap<T> k(base + dim + h * dh, L, dh, Eigen::OuterStride<>(stride));
      CStridedMap<T> v(base + 2 * dim + h * dh, L, dh, Eigen::OuterStride<>(stride));
      scores.noalias() = q * k.transpose();
      scores *= scale;
      if (!key_mask.empty()) {
        const std::uint8_t* m = key_mask.data() + b * seq_len;
        for (Eigen::Index j = 0; j < L; ++j) {
          if (!m[j]) scores(0, j) = T(kMaskedLogit);
        }
      }
      MapMat<T> p(probs.data() + (b * heads + h) * seq_len * seq_len, L, L);
      for (Eigen::Index r = 0; r < L; ++r) {
        const T mx = scores.row(r).maxCoeff();
        T total = 0;
        for (Eigen::Index c = 0; c < L; ++c) {
          const T e = std::exp(scores(r, c) - mx);
          p(r, c) = e;
          total += e;
        }
        p.row(r) /= total;
      }
      StridedMap<T> o(out.data() + b * seq_len * dim + h * dh, L, dh,
                      Eigen::OuterStride<>(static_cast<Eigen::Index>(dim)));
      o.noalias() = p * v;
    }
  }
  if (probs_out) *probs_out = probs;

  return g.record(
      "masked_attention", std::move(out), {qkv},
      [qkv, seqs, heads, seq_len, dim, dh, scale,
       probs = std::move(probs)](Graph<T>& g, const Tensor<T>& go) {
        Tensor<T>* dqkv = g.grad_buffer(qkv);
        if (!dqkv) return;
        const Tensor<T>& in = g.value(qkv);
        const Eigen::Index L = static_cast<Eigen::Index>(seq_len);
        const Eigen::Index stride = static_cast<Eigen::Index>(3 * dim);
        const Eigen::OuterStride<> s3(stride);
        const Eigen::OuterStride<> s1(static_cast<Eigen::Index>(dim));
        Mat<T> dp(L, L);
        for (std::size_t b = 0; b < seqs; ++b) {
          const T* base = in.data() + b * seq_len * 3 * dim;
          T* dbase = dqkv->data() + b * seq_len * 3 * dim;
          for (std::size_t h = 0; h < heads; ++h) {
            CStridedMap<T> q(base + h * dh, L, dh, s3);
            CStridedMap<T> k(base + dim + h * dh, L, dh, s3);
            CStridedMap<T> v(base + 2 * dim + h * dh, L, dh, s3);
            StridedMap<T> dq(dbase + h * dh, L, dh, s3);
            StridedMap<T> dk(dbase + dim + h * dh, L, dh, s3);
            StridedMap<T> dv(dbase + 2 * dim + h * dh, L, dh, s3);
            CStridedMap<T> dout(go.data() + b * seq_len * dim + h * dh, L, dh, s1);
            CMapMat<T> p(probs.data() + (b * heads + h) * seq_len * seq_len, L, L);
            dv.noalias() += p.transpose() * dout;
            dp.noalias() = dout * v.transpose();
            for (Eigen::Index r = 0; r < L; ++r) {
              const T dot = p.row(r).dot(dp.row(r));
              for (Eigen::Index c = 0; c < L; ++c) {
                dp(r, c) = p(r, c) * (dp(r, c) - dot) * scale;
              }
            }
            dq.noalias() += dp * k;
            dk.noalias() += dp.transpose() * q;
          }
        }
      });
}

template <typename T>
Var assemble_tokens(Graph<T>& g, Var patches, Var obj_token, Var mask_token,
                    Var pos, std::vector<std::uint8_t> patch_mask) {
  const Tensor<T>& pv = g.value(patches);
  const Tensor<T>& ov = g.value(obj_token);
  const Tensor<T>& mv = g.value(mask_token);
  const Tensor<T>& posv = g.value(pos);
  const std::size_t d = pv.cols();
  const std::size_t per = posv.rows();
  if (posv.cols() != d || ov.size() != d || mv.size() != d ||
      pv.rows() % per != 0) {
    shape_error("assemble_tokens", pv.shape(), posv.shape());
  }
  if (!patch_mask.empty() && patch_mask.size() != pv.rows()) {
    throw std::invalid_argument("assemble_tokens: patch mask has " +
                                std::to_string(patch_mask.size()) +
                                " entries for " + std::to_string(pv.rows()) +
                                " patches");
  }
  const std::size_t count = pv.rows() / per;
  const std::size_t seq = per + 1;
  Tensor<T> out = Tensor<T>::matrix(count * seq, d);
  for (std::size_t b = 0; b < count; ++b) {
    std::copy_n(ov.data(), d, out.data() + b * seq * d);
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t src = b * per + i;
      const T* row = (!patch_mask.empty() && patch_mask[src])
                         ? mv.data()
                         : pv.data() + src * d;
      T* dst = out.data() + (b * seq + 1 + i) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] = row[c] + posv(i, c);
    }
  }
  return g.record(
      "assemble_tokens", std::move(out), {patches, obj_token, mask_token, pos},
      [patches, obj_token, mask_token, pos, count, per,
       patch_mask = std::move(patch_mask)](Graph<T>& g, const Tensor<T>& go) {
        const std::size_t d = go.cols();
        const std::size_t seq = per + 1;
        Tensor<T>* dp = g.grad_buffer(patches);
        Tensor<T>* dobj = g.grad_buffer(obj_token);
        Tensor<T>* dmask = g.grad_buffer(mask_token);
        Tensor<T>* dpos = g.grad_buffer(pos);
        for (std::size_t b = 0; b < count; ++b) {
          const T* g0 = go.data() + b * seq * d;
          if (dobj) {
            for (std::size_t c = 0; c < d; ++c) (*dobj)[c] += g0[c];
          }
          for (std::size_t i = 0; i < per; ++i) {
            const std::size_t src = b * per + i;
            const T* gi = go.data() + (b * seq + 1 + i) * d;
            const bool masked = !patch_mask.empty() && patch_mask[src];
            T* dst = masked ? (dmask ? dmask->data() : nullptr)
                            : (dp ? dp->data() + src * d : nullptr);
            if (dst) {
              for (std::size_t c = 0; c < d; ++c) dst[c] += gi[c];
            }
            if (dpos) {
              for (std::size_t c = 0; c < d; ++c) (*dpos)(i, c) += gi[c];
            }
          }
        }
      });
}

#define ODIS_INSTANTIATE(T)                                                    \
  template Var matmul(Graph<T>&, Var, Var);                                    \
  template Var linear(Graph<T>&, Var, Var, Var);                               \
  template Var add(Graph<T>&, Var, Var);                                       \
  template Var scale(Graph<T>&, Var, T);                                       \
  template Var gelu(Graph<T>&, Var);                                           \
  template Var layer_norm(Graph<T>&, Var, Var, Var, T);                        \
  template Var softmax(Graph<T>&, Var, T);                                     \
  template Var l2_normalize(Graph<T>&, Var, T);                                \
  template Var cross_entropy_rows(Graph<T>&, const Tensor<T>&, Var);           \
  template Var sum(Graph<T>&, Var);                                            \
  template Var weighted_sum(Graph<T>&, Var, std::vector<T>);                   \
  template Var transpose(Graph<T>&, Var);                                      \
  template Var gather_rows(Graph<T>&, Var, std::vector<std::size_t>);          \
  template Var concat_rows(Graph<T>&, const std::vector<Var>&);                \
  template Var masked_attention(Graph<T>&, Var, std::size_t, std::size_t,      \
                                std::vector<std::uint8_t>, Tensor<T>*);        \
  template Var assemble_tokens(Graph<T>&, Var, Var, Var, Var,                  \
                               std::vector<std::uint8_t>);

ODIS_INSTANTIATE(float)
ODIS_INSTANTIATE(double)

#undef ODIS_INSTANTIATE

}  // namespace odis::ops
