#include "odis/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace odis::kernels {

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, T temperature) {
  if (!(temperature > T(0))) {
    throw std::invalid_argument("softmax: temperature must be positive");
  }
  if (axis >= x.rank()) {
    throw std::invalid_argument("softmax: axis out of range for shape " +
                                shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t len = x.dim(axis);
  Tensor<T> out(x.shape());
  const T inv_t = T(1) / temperature;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x[base + i * inner]);
      T total = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp((x[base + i * inner] - mx) * inv_t);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature) {
  return softmax(x, x.rank() - 1, temperature);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gamma,
                     std::span<const T> beta, T eps) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw std::invalid_argument("layer_norm: gamma/beta length " +
                                std::to_string(gamma.size()) + "/" +
                                std::to_string(beta.size()) +
                                " does not match last axis " +
                                std::to_string(d));
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row_span(r);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= T(d);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    auto o = out.row_span(r);
    for (std::size_t c = 0; c < d; ++c) {
      o[c] = (row[c] - mean) * inv * gamma[c] + beta[c];
    }
  }
  return out;
}

template <typename T>
T gelu(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2 / pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T cross_entropy(std::span<const T> p_teacher, std::span<const T> p_student) {
  if (p_teacher.size() != p_student.size()) {
    throw std::invalid_argument(
        "cross_entropy: length mismatch " + std::to_string(p_teacher.size()) +
        " vs " + std::to_string(p_student.size()));
  }
  T out = 0;
  for (std::size_t i = 0; i < p_teacher.size(); ++i) {
    out -= p_teacher[i] * std::log(std::max(p_student[i], T(kLogFloor)));
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " +
                                shape_str(a.shape()) + " * " +
                                shape_str(b.shape()));
  }
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Tensor<T> out = Tensor<T>::matrix(a.rows(), b.cols());
  Eigen::Map<Mat>(out.data(), a.rows(), b.cols()).noalias() =
      Eigen::Map<const Mat>(a.data(), a.rows(), a.cols()) *
      Eigen::Map<const Mat>(b.data(), b.rows(), b.cols());
  return out;
}

template <typename T>
T entropy(std::span<const T> p) {
  T h = 0;
  for (T v : p) {
    if (v > T(0)) h -= v * std::log(v);
  }
  return h;
}

#define ODIS_INSTANTIATE(T)                                                  \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t, T);              \
  template Tensor<T> softmax(const Tensor<T>&, T);                           \
  template Tensor<T> layer_norm(const Tensor<T>&, std::span<const T>,        \
                                std::span<const T>, T);                      \
  template T gelu(T);                                                        \
  template T cross_entropy(std::span<const T>, std::span<const T>);          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);             \
  template T entropy(std::span<const T>);

ODIS_INSTANTIATE(float)
ODIS_INSTANTIATE(double)

#undef ODIS_INSTANTIATE

}  // namespace odis::kernels
