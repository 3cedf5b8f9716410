#include "cor/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cor/kernels.hpp"

namespace cor {

template <typename T>
Var Tape<T>::parameter(const TensorT& value, bool requires_grad) {
  Node node;
  node.external = &value;
  node.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::constant(TensorT value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
const BasicTensor<T>& Tape<T>::value(Var v) const {
  return nodes_.at(v.id).value();
}

template <typename T>
BasicTensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.shape() != node.value().shape()) node.grad = TensorT(node.value().shape());
  return node.grad;
}

template <typename T>
const BasicTensor<T>& Tape<T>::grad(Var v) {
  return grad_buffer(v.id);
}

template <typename T>
Var Tape<T>::push(TensorT value, std::initializer_list<Var> inputs, std::string_view op, Backward backward) {
  kernels::ensure_finite<T>(value.data(), op);
  Node node;
  node.owned = std::move(value);
  if (record_) {
    for (Var in : inputs) node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
void Tape<T>::backward(Var out) {
  if (value(out).size() != 1) {
    throw DimensionError("backward: target must hold a single element, got " + shape_string(value(out).shape()));
  }
  for (auto& node : nodes_) node.grad = TensorT();
  grad_buffer(out.id)[0] = T{1};
  for (std::size_t id = out.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, id);
  }
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  return push(kernels::matmul(value(a), value(b)), {a, b}, "matmul", [a, b](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    if (t.wants_grad(a)) {
      TensorT da = kernels::matmul_nt(g, t.value(b));
      auto& buf = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += da[i];
    }
    if (t.wants_grad(b)) {
      TensorT db = kernels::matmul_tn(t.value(a), g);
      auto& buf = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += db[i];
    }
  });
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  return push(kernels::add(value(a), value(b)), {a, b}, "add", [a, b](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    for (Var in : {a, b}) {
      if (!t.wants_grad(in)) continue;
      auto& buf = t.grad_buffer(in.id);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }
  });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  return push(kernels::mul(value(a), value(b)), {a, b}, "mul", [a, b](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    if (t.wants_grad(a)) {
      auto& buf = t.grad_buffer(a.id);
      const auto& vb = t.value(b);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * vb[i];
    }
    if (t.wants_grad(b)) {
      auto& buf = t.grad_buffer(b.id);
      const auto& va = t.value(a);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var Tape<T>::scale(Var a, T factor) {
  return push(kernels::scale(value(a), factor), {a}, "scale", [a, factor](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    auto& buf = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * factor;
  });
}

template <typename T>
Var Tape<T>::silu(Var a) {
  return push(kernels::silu(value(a)), {a}, "silu", [a](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    const auto& x = t.value(a);
    auto& buf = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * kernels::silu_grad(x[i]);
  });
}

template <typename T>
Var Tape<T>::gelu(Var a) {
  return push(kernels::gelu(value(a)), {a}, "gelu", [a](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    const auto& x = t.value(a);
    auto& buf = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * kernels::gelu_grad(x[i]);
  });
}

template <typename T>
Var Tape<T>::rms_norm(Var x, Var gain, T eps) {
  return push(kernels::rms_norm(value(x), value(gain), eps), {x, gain}, "rms_norm",
              [x, gain, eps](Tape& t, std::size_t self) {
                const TensorT& g = t.nodes_[self].grad;
                const auto& xv = t.value(x);
                const auto& gv = t.value(gain);
                const std::size_t rows = xv.rows(), width = xv.cols();
                const bool dx = t.wants_grad(x), dgain = t.wants_grad(gain);
                for (std::size_t r = 0; r < rows; ++r) {
                  auto in = xv.row(r);
                  auto gr = g.row(r);
                  T ms{};
                  for (T v : in) ms += v * v;
                  const T inv = T{1} / std::sqrt(ms / static_cast<T>(width) + eps);
                  if (dgain) {
                    auto& gbuf = t.grad_buffer(gain.id);
                    for (std::size_t c = 0; c < width; ++c) gbuf[c] += gr[c] * in[c] * inv;
                  }
                  if (dx) {
                    // y_c = x_c * inv * w_c; d inv / d x_j = -inv^3 x_j / width
                    T dot{};
                    for (std::size_t c = 0; c < width; ++c) dot += gr[c] * gv[c] * in[c];
                    const T coeff = dot * inv * inv * inv / static_cast<T>(width);
                    auto xbuf = t.grad_buffer(x.id).row(r);
                    for (std::size_t c = 0; c < width; ++c) xbuf[c] += gr[c] * gv[c] * inv - coeff * in[c];
                  }
                }
              });
}

template <typename T>
Var Tape<T>::embedding(Var table, std::span<const int> ids) {
  std::vector<int> owned(ids.begin(), ids.end());
  return push(kernels::embedding(value(table), ids), {table}, "embedding",
              [table, owned = std::move(owned)](Tape& t, std::size_t self) {
                const TensorT& g = t.nodes_[self].grad;
                auto& buf = t.grad_buffer(table.id);
                for (std::size_t i = 0; i < owned.size(); ++i) {
                  auto src = g.row(i);
                  auto dst = buf.row(static_cast<std::size_t>(owned[i]));
                  for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                }
              });
}

template <typename T>
Var Tape<T>::softmax_rows(Var x) {
  const auto& xv = value(x);
  return push(kernels::softmax(xv, xv.rank() - 1), {x}, "softmax", [x](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    const TensorT& y = t.nodes_[self].value();
    auto& buf = t.grad_buffer(x.id);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      T dot{};
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
      auto br = buf.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) br[c] += yr[c] * (gr[c] - dot);
    }
  });
}

template <typename T>
Var Tape<T>::cross_entropy(Var logits, std::span<const int> targets) {
  std::vector<T> losses = kernels::cross_entropy_nll(value(logits), targets);
  const std::size_t rows = losses.size();
  std::vector<int> owned(targets.begin(), targets.end());
  return push(TensorT({rows, 1}, std::move(losses)), {logits}, "cross_entropy",
              [logits, owned = std::move(owned)](Tape& t, std::size_t self) {
                const TensorT& g = t.nodes_[self].grad;
                const auto& lv = t.value(logits);
                auto& buf = t.grad_buffer(logits.id);
                for (std::size_t r = 0; r < lv.rows(); ++r) {
                  if (g[r] == T{}) continue;
                  auto row = lv.row(r);
                  const T peak = *std::max_element(row.begin(), row.end());
                  T total{};
                  for (T v : row) total += std::exp(v - peak);
                  auto br = buf.row(r);
                  for (std::size_t c = 0; c < row.size(); ++c) br[c] += g[r] * std::exp(row[c] - peak) / total;
                  br[static_cast<std::size_t>(owned[r])] -= g[r];
                }
              });
}

template <typename T>
Var Tape<T>::mean(Var x) {
  const auto& xv = value(x);
  T total{};
  for (T v : xv.values()) total += v;
  const T n = static_cast<T>(xv.size());
  return push(TensorT({1, 1}, std::vector<T>{total / n}), {x}, "mean", [x, n](Tape& t, std::size_t self) {
    const T g = t.nodes_[self].grad[0] / n;
    for (auto& v : t.grad_buffer(x.id).values()) v += g;
  });
}

template <typename T>
Var Tape<T>::column_mean(Var x) {
  const auto& xv = value(x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  TensorT out({1, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += xv(r, c);
  for (auto& v : out.values()) v /= static_cast<T>(rows);
  return push(std::move(out), {x}, "column_mean", [x, rows, cols](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    auto& buf = t.grad_buffer(x.id);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) buf(r, c) += g[c] / static_cast<T>(rows);
  });
}

template <typename T>
Var Tape<T>::weighted_sum(Var x, std::vector<T> weights) {
  const auto& xv = value(x);
  if (weights.size() != xv.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " + shape_string(xv.shape()));
  }
  T total{};
  for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * weights[i];
  return push(TensorT({1, 1}, std::vector<T>{total}), {x}, "weighted_sum",
              [x, weights = std::move(weights)](Tape& t, std::size_t self) {
                const T g = t.nodes_[self].grad[0];
                auto& buf = t.grad_buffer(x.id);
                for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g * weights[i];
              });
}

template <typename T>
Var Tape<T>::gather_rows(Var x, std::vector<std::size_t> rows) {
  const auto& xv = value(x);
  const std::size_t width = xv.cols();
  TensorT out({rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    auto src = xv.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return push(std::move(out), {x}, "gather_rows", [x, rows = std::move(rows)](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    auto& buf = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = g.row(i);
      auto dst = buf.row(rows[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var Tape<T>::scatter_rows(Var x, std::vector<std::size_t> rows, std::size_t out_rows) {
  const auto& xv = value(x);
  if (rows.size() != xv.rows()) throw DimensionError("scatter_rows: index count does not match rows");
  const std::size_t width = xv.cols();
  TensorT out({out_rows, width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= out_rows) throw IndexError("scatter_rows: row " + std::to_string(rows[i]) + " out of range");
    auto src = xv.row(i);
    auto dst = out.row(rows[i]);
    for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
  }
  return push(std::move(out), {x}, "scatter_rows", [x, rows = std::move(rows)](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    auto& buf = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = g.row(rows[i]);
      auto dst = buf.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var Tape<T>::scale_rows(Var x, Var s) {
  const auto& xv = value(x);
  const auto& sv = value(s);
  if (sv.size() != xv.rows()) throw DimensionError("scale_rows: scale vector does not match rows");
  TensorT out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (auto& v : out.row(r)) v *= sv[r];
  return push(std::move(out), {x, s}, "scale_rows", [x, s](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    const auto& xv = t.value(x);
    const auto& sv = t.value(s);
    if (t.wants_grad(x)) {
      auto& buf = t.grad_buffer(x.id);
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        auto gr = g.row(r);
        auto br = buf.row(r);
        for (std::size_t c = 0; c < gr.size(); ++c) br[c] += gr[c] * sv[r];
      }
    }
    if (t.wants_grad(s)) {
      auto& buf = t.grad_buffer(s.id);
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        auto gr = g.row(r);
        auto xr = xv.row(r);
        T dot{};
        for (std::size_t c = 0; c < gr.size(); ++c) dot += gr[c] * xr[c];
        buf[r] += dot;
      }
    }
  });
}

template <typename T>
Var Tape<T>::gather_elements(Var x, std::vector<Cell> cells) {
  const auto& xv = value(x);
  TensorT out({cells.size(), 1});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].row >= xv.rows() || cells[i].col >= xv.cols()) throw IndexError("gather_elements: cell out of range");
    out[i] = xv(cells[i].row, cells[i].col);
  }
  return push(std::move(out), {x}, "gather_elements", [x, cells = std::move(cells)](Tape& t, std::size_t self) {
    const TensorT& g = t.nodes_[self].grad;
    auto& buf = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < cells.size(); ++i) buf(cells[i].row, cells[i].col) += g[i];
  });
}

template <typename T>
Var Tape<T>::causal_attention(Var q, Var k, Var v, std::size_t heads, std::size_t seq_len) {
  const auto& qv = value(q);
  const auto& kv = value(k);
  const auto& vv = value(v);
  if (qv.shape() != kv.shape() || qv.shape() != vv.shape()) throw DimensionError("causal_attention: q/k/v shapes differ");
  const std::size_t rows = qv.rows(), width = qv.cols();
  if (heads == 0 || width % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  if (seq_len == 0 || rows % seq_len != 0) throw DimensionError("causal_attention: rows not a multiple of seq_len");
  const std::size_t head_dim = width / heads;
  const std::size_t sequences = rows / seq_len;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(head_dim));

  // probs[(s * heads + h) * seq_len * seq_len + i * seq_len + j], zero for j > i.
  std::vector<T> probs(sequences * heads * seq_len * seq_len, T{});
  TensorT out({rows, width});
  std::vector<T> scores(seq_len);
  for (std::size_t s = 0; s < sequences; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * head_dim;
      T* p = probs.data() + (s * heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const auto qi = qv.row(s * seq_len + i).subspan(off, head_dim);
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const auto kj = kv.row(s * seq_len + j).subspan(off, head_dim);
          T dot{};
          for (std::size_t c = 0; c < head_dim; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * inv_sqrt;
          peak = std::max(peak, scores[j]);
        }
        T total{};
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - peak);
          total += scores[j];
        }
        auto oi = out.row(s * seq_len + i).subspan(off, head_dim);
        for (std::size_t j = 0; j <= i; ++j) {
          const T pij = scores[j] / total;
          p[i * seq_len + j] = pij;
          const auto vj = vv.row(s * seq_len + j).subspan(off, head_dim);
          for (std::size_t c = 0; c < head_dim; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }

  return push(std::move(out), {q, k, v}, "causal_attention",
              [q, k, v, heads, seq_len, head_dim, sequences, inv_sqrt, probs = std::move(probs)](Tape& t,
                                                                                                std::size_t self) {
                const TensorT& g = t.nodes_[self].grad;
                const auto& qv = t.value(q);
                const auto& kv = t.value(k);
                const auto& vv = t.value(v);
                const std::size_t width = qv.cols();
                TensorT dq(qv.shape()), dk(kv.shape()), dv(vv.shape());
                std::vector<T> dp(seq_len);
                for (std::size_t s = 0; s < sequences; ++s) {
                  for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = h * head_dim;
                    const T* p = probs.data() + (s * heads + h) * seq_len * seq_len;
                    for (std::size_t i = 0; i < seq_len; ++i) {
                      const std::size_t ri = s * seq_len + i;
                      const T* gi = g.data().data() + ri * width + off;
                      T dot{};
                      for (std::size_t j = 0; j <= i; ++j) {
                        const std::size_t rj = s * seq_len + j;
                        const T* vj = vv.data().data() + rj * width + off;
                        T* dvj = dv.data().data() + rj * width + off;
                        const T pij = p[i * seq_len + j];
                        T acc{};
                        for (std::size_t c = 0; c < head_dim; ++c) {
                          dvj[c] += pij * gi[c];
                          acc += gi[c] * vj[c];
                        }
                        dp[j] = acc;
                        dot += pij * acc;
                      }
                      const T* qi = qv.data().data() + ri * width + off;
                      T* dqi = dq.data().data() + ri * width + off;
                      for (std::size_t j = 0; j <= i; ++j) {
                        const std::size_t rj = s * seq_len + j;
                        const T ds = p[i * seq_len + j] * (dp[j] - dot) * inv_sqrt;
                        if (ds == T{}) continue;
                        const T* kj = kv.data().data() + rj * width + off;
                        T* dkj = dk.data().data() + rj * width + off;
                        for (std::size_t c = 0; c < head_dim; ++c) {
                          dqi[c] += ds * kj[c];
                          dkj[c] += ds * qi[c];
                        }
                      }
                    }
                  }
                }
                const std::pair<Var, TensorT*> parts[] = {{q, &dq}, {k, &dk}, {v, &dv}};
                for (const auto& [var, delta] : parts) {
                  if (!t.wants_grad(var)) continue;
                  auto& buf = t.grad_buffer(var.id);
                  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += (*delta)[i];
                }
              });
}

template class Tape<float>;
template class Tape<double>;

}  // namespace cor
