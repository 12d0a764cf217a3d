#pragma once

#include <span>
#include <vector>

#include "odis/tensor.hpp"

// Plain numeric kernels shared by the graph ops and the evaluation code.
namespace odis::kernels {

inline constexpr double kLogFloor = 1e-12;

/// Row-wise (last axis) softmax of x / temperature, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature);

/// Softmax along `axis` of a tensor of any rank.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, T temperature);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gamma,
                     std::span<const T> beta, T eps);

/// tanh-approximation GELU.
template <typename T>
T gelu(T x);

/// -sum_i p_teacher[i] * log(max(p_student[i], 1e-12)). Both inputs must be
/// probability vectors of equal length.
template <typename T>
T cross_entropy(std::span<const T> p_teacher, std::span<const T> p_student);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T entropy(std::span<const T> p);

}  // namespace odis::kernels
