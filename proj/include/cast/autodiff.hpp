#pragma once

#include "cast/parameter.hpp"

#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace cast {

template <class Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <class Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Single-use reverse-mode tape. Record one forward pass, call backward()
/// once, then reset() before the next forward pass.
///
/// Nodes that depend only on constants and frozen parameters keep no
/// backward closure, so frozen subgraphs cost nothing in the reverse sweep.
template <class Scalar>
class Tape {
 public:
  using Grad = Vector<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Grad&)>;

  /// With `record = false` no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value);
  /// Differentiable input that is not a Parameter; read its gradient with grad().
  Var<Scalar> leaf(Tensor<Scalar> value);
  /// References `p` without copying; the parameter must outlive the tape.
  Var<Scalar> param(const Parameter<Scalar>& p);

  const Tensor<Scalar>& value(Var<Scalar> v) const;
  bool requires_grad(Var<Scalar> v) const;
  /// Gradient accumulated for a leaf after backward(); empty if none reached it.
  std::optional<Tensor<Scalar>> grad(Var<Scalar> v) const;

  /// Populates Parameter::grad for every non-frozen parameter on the tape.
  void backward(Var<Scalar> loss);
  void reset();

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Op-implementation interface.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, BackwardFn fn);
  /// Zero-initialised gradient buffer of `v`; only valid when v requires grad.
  Grad& grad_buffer(Var<Scalar> v);
  void accumulate(Var<Scalar> v, const Eigen::Ref<const Grad>& g);

 private:
  struct Node {
    Tensor<Scalar> value;
    const Parameter<Scalar>* param = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
    Grad grad;
    bool has_grad = false;
  };

  Node& node(Var<Scalar> v);
  const Node& node(Var<Scalar> v) const;
  void check_open() const;

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<Scalar>*, int> param_nodes_;
  bool record_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. "rows" means the product of all leading axes,
// "cols" the extent of the last axis.

/// Batched matrix product over the last two axes with numpy-style broadcast
/// of the leading (batch) axes.
template <class Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);

/// x[rows, in] * w[in, out] (+ b[out]). Each output row is computed with the
/// same instruction sequence regardless of its position, so results do not
/// depend on how tokens are ordered or batched.
template <class Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w);
template <class Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b);

template <class Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <class Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b);
template <class Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);
template <class Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s);

/// out[r] = x[r] + table[index[r]] for a table of row vectors.
template <class Scalar>
Var<Scalar> add_indexed_rows(Var<Scalar> x, Var<Scalar> table, std::vector<Index> index);

template <class Scalar>
Var<Scalar> sum(Var<Scalar> x);
template <class Scalar>
Var<Scalar> mean(Var<Scalar> x);

/// Exact GELU, x * Phi(x).
template <class Scalar>
Var<Scalar> gelu(Var<Scalar> x);

template <class Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps);

template <class Scalar>
Var<Scalar> softmax_lastdim(Var<Scalar> x);

/// out row i = x row rows[i]. Gradient scatters back with accumulation.
template <class Scalar>
Var<Scalar> gather_rows(Var<Scalar> x, std::vector<Index> rows);

template <class Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b);
template <class Scalar>
Var<Scalar> concat_cols(Var<Scalar> a, Var<Scalar> b);

/// Mean over consecutive groups of `group_size` rows. Each column of a group
/// is summed in sorted order, so the result is bitwise invariant to the
/// order of rows inside a group.
template <class Scalar>
Var<Scalar> group_mean_rows(Var<Scalar> x, Index group_size);

/// Multi-head scaled dot-product attention over independent groups of
/// contiguous rows: q is [groups * Lq, d], k and v are [groups * Lk, d].
template <class Scalar>
Var<Scalar> grouped_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Index groups, Index heads);

/// Mean cross-entropy of logits [batch, classes] with optional label smoothing.
template <class Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> labels, Scalar smoothing = 0);

template <class Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape);

// Plain (non-recording) helpers shared by ops, tests and inference code.
template <class Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& logits);
template <class Scalar>
Scalar gelu_value(Scalar x);

}  // namespace cast
