#pragma once

// Pure dense kernels. Every kernel validates shapes, throws DimensionError or
// IndexError on bad input, and throws NumericError if it produces NaN/Inf.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "cor/tensor.hpp"

namespace cor::kernels {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a * b^T
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a^T * b
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

/// Numerically stable softmax along `axis` (max subtraction).
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

template <typename T>
std::vector<T> softmax(std::span<const T> x);

/// Per-row negative log-likelihood of `targets` under softmax(logits).
template <typename T>
std::vector<T> cross_entropy_nll(const BasicTensor<T>& logits, std::span<const int> targets);

/// x / rms(x) * gain, row-wise.
template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, T eps);

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids);

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x);

/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T>
T silu(T x);
template <typename T>
T silu_grad(T x);
template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

/// Indices of the k largest values, ordered by value descending. Ties go to
/// the lower index.
template <typename T>
std::vector<std::size_t> top_k(std::span<const T> values, std::size_t k);

/// Linear interpolation between closest ranks: position p/100 * (n - 1) in the
/// sorted list.
double percentile(std::span<const double> values, double p);

/// (x - min) / (max - min); all zeros when max == min.
template <typename T>
std::vector<T> min_max_normalize(std::span<const T> values);

template <typename T>
void ensure_finite(std::span<const T> values, std::string_view context);

}  // namespace cor::kernels
