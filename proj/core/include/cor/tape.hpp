#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "cor/tensor.hpp"

namespace cor {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

/// (row, column) coordinate used by gather_elements.
struct Cell {
  std::size_t row;
  std::size_t col;
};

/// Reverse-mode autodiff tape over dense tensors.
///
/// Every op evaluates eagerly and appends one node. When recording is on and
/// at least one input requires a gradient, the node also stores a backward
/// closure; backward() then replays closures in exact reverse recording
/// order. With recording off the tape is a plain evaluator, which is how
/// inference runs.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Leaf that references `value` without copying it; `value` must outlive the tape.
  Var parameter(const TensorT& value, bool requires_grad = true);
  Var constant(TensorT value);

  const TensorT& value(Var v) const;
  /// Gradient of the last backward() target with respect to `v` (zeros if unreachable).
  const TensorT& grad(Var v);
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Seeds d(out)/d(out) = 1 for a single-element `out` and runs the reverse sweep.
  void backward(Var out);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  Var silu(Var a);
  Var gelu(Var a);
  Var rms_norm(Var x, Var gain, T eps);
  Var embedding(Var table, std::span<const int> ids);
  Var softmax_rows(Var x);
  /// Per-row NLL as an [rows x 1] column.
  Var cross_entropy(Var logits, std::span<const int> targets);
  /// Mean of all elements as a [1 x 1] scalar.
  Var mean(Var x);
  /// Column means of an [r x c] matrix as [1 x c].
  Var column_mean(Var x);
  /// sum(x * weights) with constant weights of x's size, as [1 x 1].
  Var weighted_sum(Var x, std::vector<T> weights);
  Var gather_rows(Var x, std::vector<std::size_t> rows);
  /// Sums row i of x into output row rows[i]; output has `out_rows` rows.
  Var scatter_rows(Var x, std::vector<std::size_t> rows, std::size_t out_rows);
  /// Multiplies row i of x by s[i]; s is [rows x 1].
  Var scale_rows(Var x, Var s);
  /// Picks x(row, col) per cell into an [m x 1] column.
  Var gather_elements(Var x, std::vector<Cell> cells);
  /// Multi-head causal self-attention over packed sequences of length `seq_len`.
  Var causal_attention(Var q, Var k, Var v, std::size_t heads, std::size_t seq_len);

 private:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    TensorT owned;
    const TensorT* external = nullptr;
    TensorT grad;
    bool requires_grad = false;
    Backward backward;

    const TensorT& value() const { return external ? *external : owned; }
  };

  Var push(TensorT value, std::initializer_list<Var> inputs, std::string_view op, Backward backward);
  TensorT& grad_buffer(std::size_t id);
  bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }

  bool record_;
  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace cor
