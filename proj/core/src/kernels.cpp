#include "cor/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace cor::kernels {
namespace {

template <typename T>
void require_matrix(const BasicTensor<T>& t, std::string_view op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

}  // namespace

template <typename T>
void ensure_finite(std::span<const T> values, std::string_view context) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("non-finite value produced by " + std::string(context) + " at element " + std::to_string(i));
    }
  }
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  ensure_finite<T>(out.data(), "matmul");
  return out;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = pb + j * k;
      T acc{};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out(i, j) = acc;
    }
  }
  ensure_finite<T>(out.data(), "matmul_nt");
  return out;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: inner dimensions " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  }
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = pa + p * m;
    const T* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{}) continue;
      T* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  ensure_finite<T>(out.data(), "matmul_tn");
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  BasicTensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  ensure_finite<T>(out.data(), "add");
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  BasicTensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  ensure_finite<T>(out.data(), "mul");
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  BasicTensor<T> out = a;
  for (auto& v : out.values()) v *= factor;
  ensure_finite<T>(out.data(), "scale");
  return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  ensure_finite<T>(x.data(), "softmax input");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t extent = shape[axis];

  BasicTensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < extent; ++j) peak = std::max(peak, x[base + j * inner]);
      T total{};
      for (std::size_t j = 0; j < extent; ++j) {
        const T e = std::exp(x[base + j * inner] - peak);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < extent; ++j) out[base + j * inner] /= total;
    }
  }
  return out;
}

template <typename T>
std::vector<T> softmax(std::span<const T> x) {
  BasicTensor<T> t({x.size()}, std::vector<T>(x.begin(), x.end()));
  return softmax(t, 0).values();
}

template <typename T>
std::vector<T> cross_entropy_nll(const BasicTensor<T>& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy_nll");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_nll: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<T> losses(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const int target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw IndexError("cross_entropy_nll: target " + std::to_string(target) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    auto row = logits.row(r);
    const T peak = *std::max_element(row.begin(), row.end());
    T total{};
    for (T v : row) total += std::exp(v - peak);
    losses[r] = std::log(total) + peak - row[static_cast<std::size_t>(target)];
  }
  ensure_finite<T>(losses, "cross_entropy_nll");
  return losses;
}

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, T eps) {
  const std::size_t rows = x.rows(), width = x.cols();
  if (gain.size() != width) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " for width " + std::to_string(width));
  }
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.row(r);
    T ms{};
    for (T v : in) ms += v * v;
    const T inv = T{1} / std::sqrt(ms / static_cast<T>(width) + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < width; ++c) o[c] = in[c] * inv * gain[c];
  }
  ensure_finite<T>(out.data(), "rms_norm");
  return out;
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  BasicTensor<T> out({ids.size(), table.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(table.rows()) + ")");
    }
    auto src = table.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
  const T s = T{1} / (T{1} + std::exp(-x));
  return s * (T{1} + x * (T{1} - s));
}

template <typename T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::sqrt(T{2})));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::sqrt(T{2})));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * T{3.14159265358979323846});
  return cdf + x * pdf;
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  BasicTensor<T> out = x;
  for (auto& v : out.values()) v = silu(v);
  ensure_finite<T>(out.data(), "silu");
  return out;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> out = x;
  for (auto& v : out.values()) v = gelu(v);
  ensure_finite<T>(out.data(), "gelu");
  return out;
}

template <typename T>
std::vector<std::size_t> top_k(std::span<const T> values, std::size_t k) {
  if (k > values.size()) {
    throw DimensionError("top_k: k=" + std::to_string(k) + " exceeds " + std::to_string(values.size()) + " values");
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (values[a] != values[b]) return values[a] > values[b];
                      return a < b;
                    });
  order.resize(k);
  return order;
}

double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw InputError("percentile of an empty list");
  if (!(p >= 0.0 && p <= 100.0)) throw InputError("percentile rank must lie in [0, 100]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || sorted[lo] == sorted[hi]) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

template <typename T>
std::vector<T> min_max_normalize(std::span<const T> values) {
  std::vector<T> out(values.size(), T{});
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const T range = *hi - *lo;
  if (!(range > T{})) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

#define COR_INSTANTIATE_KERNELS(T)                                                                  \
  template void ensure_finite<T>(std::span<const T>, std::string_view);                             \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> matmul_nt<T>(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> matmul_tn<T>(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                       \
  template BasicTensor<T> softmax<T>(const BasicTensor<T>&, std::size_t);                           \
  template std::vector<T> softmax<T>(std::span<const T>);                                           \
  template std::vector<T> cross_entropy_nll<T>(const BasicTensor<T>&, std::span<const int>);        \
  template BasicTensor<T> rms_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&, T);             \
  template BasicTensor<T> embedding<T>(const BasicTensor<T>&, std::span<const int>);                \
  template BasicTensor<T> silu<T>(const BasicTensor<T>&);                                           \
  template BasicTensor<T> gelu<T>(const BasicTensor<T>&);                                           \
  template T silu<T>(T);                                                                            \
  template T silu_grad<T>(T);                                                                       \
  template T gelu<T>(T);                                                                            \
  template T gelu_grad<T>(T);                                                                       \
  template std::vector<std::size_t> top_k<T>(std::span<const T>, std::size_t);                      \
  template std::vector<T> min_max_normalize<T>(std::span<const T>);

COR_INSTANTIATE_KERNELS(float)
COR_INSTANTIATE_KERNELS(double)

#undef COR_INSTANTIATE_KERNELS

}  // namespace cor::kernels
