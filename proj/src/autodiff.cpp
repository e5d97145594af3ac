#include "cast/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

namespace cast {

// ---------------------------------------------------------------------------
// Tape

template <class Scalar>
typename Tape<Scalar>::Node& Tape<Scalar>::node(Var<Scalar> v) {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw TapeError("variable does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <class Scalar>
const typename Tape<Scalar>::Node& Tape<Scalar>::node(Var<Scalar> v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw TapeError("variable does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <class Scalar>
void Tape<Scalar>::check_open() const {
  if (consumed_) throw TapeError("tape already ran backward; reset() it before recording a new forward pass");
}

template <class Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value) {
  return record(std::move(value), {}, nullptr);
}

template <class Scalar>
Var<Scalar> Tape<Scalar>::leaf(Tensor<Scalar> value) {
  check_open();
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class Scalar>
Var<Scalar> Tape<Scalar>::param(const Parameter<Scalar>& p) {
  check_open();
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.param = &p;
  n.requires_grad = record_ && !p.frozen;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return {this, id};
}

template <class Scalar>
const Tensor<Scalar>& Tape<Scalar>::value(Var<Scalar> v) const {
  const Node& n = node(v);
  return n.param ? n.param->value : n.value;
}

template <class Scalar>
bool Tape<Scalar>::requires_grad(Var<Scalar> v) const {
  return node(v).requires_grad;
}

template <class Scalar>
std::optional<Tensor<Scalar>> Tape<Scalar>::grad(Var<Scalar> v) const {
  const Node& n = node(v);
  if (!n.has_grad) return std::nullopt;
  return Tensor<Scalar>(value(v).shape(), n.grad);
}

template <class Scalar>
Var<Scalar> Tape<Scalar>::record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, BackwardFn fn) {
  check_open();
  bool needs = false;
  if (record_)
    for (auto in : inputs) needs = needs || node(in).requires_grad;
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class Scalar>
typename Tape<Scalar>::Grad& Tape<Scalar>::grad_buffer(Var<Scalar> v) {
  Node& n = node(v);
  if (!n.requires_grad) throw TapeError("gradient buffer requested for a value that does not require grad");
  if (!n.has_grad) {
    n.grad = Grad::Zero(value(v).size());
    n.has_grad = true;
  }
  return n.grad;
}

template <class Scalar>
void Tape<Scalar>::accumulate(Var<Scalar> v, const Eigen::Ref<const Grad>& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

template <class Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
  if (consumed_) throw TapeError("backward() called twice on the same forward pass");
  if (!record_) throw TapeError("backward() on a tape created without gradient recording");
  const Tensor<Scalar>& lv = value(loss);
  if (lv.size() != 1) throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(lv.shape()));
  consumed_ = true;
  if (!node(loss).requires_grad) return;
  accumulate(loss, Grad::Ones(1));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param && !n.param->frozen) {
      auto& slot = n.param->grad;
      if (slot)
        slot->data() += n.grad;
      else
        slot = Tensor<Scalar>(n.param->value.shape(), n.grad);
    }
    if (!n.leaf) {
      n.grad.resize(0);
      n.has_grad = false;
    }
    n.backward = nullptr;
  }
}

template <class Scalar>
void Tape<Scalar>::reset() {
  nodes_.clear();
  param_nodes_.clear();
  consumed_ = false;
}

// ---------------------------------------------------------------------------
// Ops

namespace {

template <class Scalar>
void require_same_shape(const char* op, Var<Scalar> a, Var<Scalar> b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

template <class Scalar>
Scalar erf_gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

}  // namespace

template <class Scalar>
Scalar gelu_value(Scalar x) {
  return erf_gelu(x);
}

template <class Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_string(sa) + " and " + shape_string(sb));
  const Index m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  if (sb[sb.size() - 2] != k)
    throw DimensionError("matmul: inner extents differ for " + shape_string(sa) + " and " + shape_string(sb));

  const Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
  const std::size_t rank = std::max(ba.size(), bb.size());
  Shape out_batch(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index da = i < rank - ba.size() ? 1 : ba[i - (rank - ba.size())];
    const Index db = i < rank - bb.size() ? 1 : bb[i - (rank - bb.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("matmul: batch axes of " + shape_string(sa) + " and " + shape_string(sb) +
                           " do not broadcast");
    out_batch[i] = std::max(da, db);
  }
  // Map each output batch element to its source batch elements.
  const Index batches = numel(out_batch);
  auto a_of = std::make_shared<std::vector<Index>>(batches);
  auto b_of = std::make_shared<std::vector<Index>>(batches);
  for (Index o = 0; o < batches; ++o) {
    Index rem = o, ia = 0, ib = 0, stride_a = 1, stride_b = 1;
    for (std::size_t i = rank; i-- > 0;) {
      const Index coord = rem % out_batch[i];
      rem /= out_batch[i];
      if (i >= rank - ba.size()) {
        const Index ext = ba[i - (rank - ba.size())];
        ia += (ext == 1 ? 0 : coord) * stride_a;
        stride_a *= ext;
      }
      if (i >= rank - bb.size()) {
        const Index ext = bb[i - (rank - bb.size())];
        ib += (ext == 1 ? 0 : coord) * stride_b;
        stride_b *= ext;
      }
    }
    (*a_of)[o] = ia;
    (*b_of)[o] = ib;
  }

  Shape out_shape = out_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<Scalar> out(out_shape);
  const Scalar* pa = a.value().ptr();
  const Scalar* pb = b.value().ptr();
  for (Index o = 0; o < batches; ++o) {
    ConstMatrixMap<Scalar> A(pa + (*a_of)[o] * m * k, m, k);
    ConstMatrixMap<Scalar> B(pb + (*b_of)[o] * k * n, k, n);
    MatrixMap<Scalar>(out.ptr() + o * m * n, m, n).noalias() = A * B;
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, a_of, b_of, m, k, n, batches](Tape<Scalar>& t, const Vector<Scalar>& g) {
    const Scalar* pa = t.value(a).ptr();
    const Scalar* pb = t.value(b).ptr();
    for (Index o = 0; o < batches; ++o) {
      ConstMatrixMap<Scalar> G(g.data() + o * m * n, m, n);
      ConstMatrixMap<Scalar> A(pa + (*a_of)[o] * m * k, m, k);
      ConstMatrixMap<Scalar> B(pb + (*b_of)[o] * k * n, k, n);
      if (t.requires_grad(a))
        MatrixMap<Scalar>(t.grad_buffer(a).data() + (*a_of)[o] * m * k, m, k).noalias() += G * B.transpose();
      if (t.requires_grad(b))
        MatrixMap<Scalar>(t.grad_buffer(b).data() + (*b_of)[o] * k * n, k, n).noalias() += A.transpose() * G;
    }
  });
}

namespace {

template <class Scalar>
Var<Scalar> linear_impl(Var<Scalar> x, Var<Scalar> w, const Var<Scalar>* b) {
  const Tensor<Scalar>& xv = x.value();
  const Tensor<Scalar>& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0))
    throw DimensionError("linear: input " + shape_string(xv.shape()) + " incompatible with weight " +
                         shape_string(wv.shape()));
  const Index rows = xv.rows(), in = wv.dim(0), out_dim = wv.dim(1);
  if (b && b->value().size() != out_dim)
    throw DimensionError("linear: bias " + shape_string(b->value().shape()) + " does not match weight " +
                         shape_string(wv.shape()));
  Shape out_shape = xv.shape();
  out_shape.back() = out_dim;
  Tensor<Scalar> out(out_shape);
  auto X = xv.matrix();
  auto W = wv.matrix();
  auto Y = out.matrix();
  // The accumulator is a fresh aligned buffer so every row runs the same kernel path.
  RowVector<Scalar> acc(out_dim);
  for (Index r = 0; r < rows; ++r) {
    acc.noalias() = X.row(r) * W;
    if (b) acc += b->value().data().transpose();
    Y.row(r) = acc;
  }
  std::initializer_list<Var<Scalar>> inputs = {x, w};
  Var<Scalar> bias = b ? *b : Var<Scalar>{};
  auto fn = [x, w, bias, rows, in, out_dim](Tape<Scalar>& t, const Vector<Scalar>& g) {
    ConstMatrixMap<Scalar> G(g.data(), rows, out_dim);
    if (t.requires_grad(x)) {
      MatrixMap<Scalar>(t.grad_buffer(x).data(), rows, in).noalias() += G * t.value(w).matrix().transpose();
    }
    if (t.requires_grad(w)) {
      MatrixMap<Scalar>(t.grad_buffer(w).data(), in, out_dim).noalias() += t.value(x).matrix().transpose() * G;
    }
    if (bias.tape && t.requires_grad(bias)) {
      t.grad_buffer(bias) += G.colwise().sum().transpose();
    }
  };
  if (b) return x.tape->record(std::move(out), {x, w, *b}, fn);
  return x.tape->record(std::move(out), inputs, fn);
}

}  // namespace

template <class Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w) {
  return linear_impl<Scalar>(x, w, nullptr);
}

template <class Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
  return linear_impl<Scalar>(x, w, &b);
}

template <class Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  require_same_shape("add", a, b);
  Tensor<Scalar> out(a.shape(), a.value().data() + b.value().data());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Vector<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  require_same_shape("sub", a, b);
  Tensor<Scalar> out(a.shape(), a.value().data() - b.value().data());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Vector<Scalar>& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.grad_buffer(b) -= g;
  });
}

template <class Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  require_same_shape("mul", a, b);
  Tensor<Scalar> out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (t.requires_grad(a)) t.grad_buffer(a) += g.cwiseProduct(t.value(b).data());
    if (t.requires_grad(b)) t.grad_buffer(b) += g.cwiseProduct(t.value(a).data());
  });
}

template <class Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Tensor<Scalar> out(a.shape(), a.value().data() * s);
  return a.tape->record(std::move(out), {a}, [a, s](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (t.requires_grad(a)) t.grad_buffer(a) += g * s;
  });
}

template <class Scalar>
Var<Scalar> add_indexed_rows(Var<Scalar> x, Var<Scalar> table, std::vector<Index> index) {
  const Tensor<Scalar>& xv = x.value();
  const Tensor<Scalar>& tv = table.value();
  if (tv.cols() != xv.cols() || static_cast<Index>(index.size()) != xv.rows())
    throw DimensionError("add_indexed_rows: table " + shape_string(tv.shape()) + " / " +
                         std::to_string(index.size()) + " indices incompatible with " + shape_string(xv.shape()));
  for (Index i : index)
    if (i < 0 || i >= tv.rows()) throw DimensionError("add_indexed_rows: index " + std::to_string(i) + " out of range");
  Tensor<Scalar> out = xv;
  auto Y = out.matrix();
  auto T = tv.matrix();
  for (Index r = 0; r < xv.rows(); ++r) Y.row(r) += T.row(index[static_cast<std::size_t>(r)]);
  auto idx = std::make_shared<std::vector<Index>>(std::move(index));
  const Index cols = xv.cols(), rows = xv.rows(), trows = tv.rows();
  return x.tape->record(std::move(out), {x, table}, [x, table, idx, rows, cols, trows](Tape<Scalar>& t, const Vector<Scalar>& g) {
    t.accumulate(x, g);
    if (t.requires_grad(table)) {
      MatrixMap<Scalar> dT(t.grad_buffer(table).data(), trows, cols);
      ConstMatrixMap<Scalar> G(g.data(), rows, cols);
      for (Index r = 0; r < rows; ++r) dT.row((*idx)[static_cast<std::size_t>(r)]) += G.row(r);
    }
  });
}

template <class Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  const Index n = x.value().size();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.value().data().sum());
  return x.tape->record(std::move(out), {x}, [x, n](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (t.requires_grad(x)) t.grad_buffer(x).array() += g[0];
  });
}

template <class Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

template <class Scalar>
Var<Scalar> gelu(Var<Scalar> x) {
  const Vector<Scalar>& xv = x.value().data();
  Vector<Scalar> y = xv.unaryExpr([](Scalar v) { return erf_gelu(v); });
  return x.tape->record(Tensor<Scalar>(x.shape(), std::move(y)), {x}, [x](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (!t.requires_grad(x)) return;
    const Vector<Scalar>& xv = t.value(x).data();
    const Scalar inv_sqrt2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    Vector<Scalar> d = xv.unaryExpr([inv_sqrt2pi](Scalar v) {
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v / std::numbers::sqrt2_v<Scalar>));
      return cdf + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
    });
    t.grad_buffer(x) += g.cwiseProduct(d);
  });
}

template <class Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps) {
  const Tensor<Scalar>& xv = x.value();
  const Index rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols)
    throw DimensionError("layer_norm: affine parameters " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match input " + shape_string(xv.shape()));
  Tensor<Scalar> out(xv.shape());
  auto xhat = std::make_shared<RowMatrix<Scalar>>(rows, cols);
  auto inv_std = std::make_shared<Vector<Scalar>>(rows);
  auto X = xv.matrix();
  auto Y = out.matrix();
  const auto gam = gamma.value().data().transpose();
  const auto bet = beta.value().data().transpose();
  for (Index r = 0; r < rows; ++r) {
    // Scalar loops: the result must not depend on the row's memory alignment.
    const Scalar* xr = X.row(r).data();
    Scalar mu = 0, var = 0;
    for (Index c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<Scalar>(cols);
    for (Index c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<Scalar>(cols);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    xhat->row(r) = (X.row(r).array() - mu) * is;
    Y.row(r) = xhat->row(r).cwiseProduct(gam) + bet;
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, rows, cols](Tape<Scalar>& t, const Vector<Scalar>& g) {
    ConstMatrixMap<Scalar> G(g.data(), rows, cols);
    if (t.requires_grad(gamma))
      t.grad_buffer(gamma) += G.cwiseProduct(*xhat).colwise().sum().transpose();
    if (t.requires_grad(beta)) t.grad_buffer(beta) += G.colwise().sum().transpose();
    if (t.requires_grad(x)) {
      MatrixMap<Scalar> dX(t.grad_buffer(x).data(), rows, cols);
      const auto gam = t.value(gamma).data().transpose();
      RowVector<Scalar> dxhat(cols);
      for (Index r = 0; r < rows; ++r) {
        dxhat = G.row(r).cwiseProduct(gam);
        const Scalar m1 = dxhat.mean();
        const Scalar m2 = dxhat.cwiseProduct(xhat->row(r)).mean();
        dX.row(r).array() += (*inv_std)[r] * (dxhat.array() - m1 - xhat->row(r).array() * m2);
      }
    }
  });
}

template <class Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& logits) {
  if (!logits.data().allFinite()) throw NumericError("softmax: non-finite input");
  Tensor<Scalar> out(logits.shape());
  auto X = logits.matrix();
  auto Y = out.matrix();
  for (Index r = 0; r < X.rows(); ++r) {
    const Scalar mx = X.row(r).maxCoeff();
    Y.row(r) = (X.row(r).array() - mx).exp();
    Y.row(r) /= Y.row(r).sum();
  }
  return out;
}

template <class Scalar>
Var<Scalar> softmax_lastdim(Var<Scalar> x) {
  Tensor<Scalar> out = softmax_rows(x.value());
  const Index rows = out.rows(), cols = out.cols();
  auto y = std::make_shared<Tensor<Scalar>>(out);
  return x.tape->record(std::move(out), {x}, [x, y, rows, cols](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (!t.requires_grad(x)) return;
    ConstMatrixMap<Scalar> G(g.data(), rows, cols);
    auto Y = y->matrix();
    MatrixMap<Scalar> dX(t.grad_buffer(x).data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Scalar dot = G.row(r).dot(Y.row(r));
      dX.row(r).array() += Y.row(r).array() * (G.row(r).array() - dot);
    }
  });
}

template <class Scalar>
Var<Scalar> gather_rows(Var<Scalar> x, std::vector<Index> rows) {
  const Tensor<Scalar>& xv = x.value();
  const Index cols = xv.cols(), in_rows = xv.rows();
  for (Index r : rows)
    if (r < 0 || r >= in_rows)
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " + shape_string(xv.shape()));
  if (rows.empty()) throw DimensionError("gather_rows: empty selection");
  Tensor<Scalar> out({static_cast<Index>(rows.size()), cols});
  auto X = xv.matrix();
  auto Y = out.matrix();
  for (std::size_t i = 0; i < rows.size(); ++i) Y.row(static_cast<Index>(i)) = X.row(rows[i]);
  auto idx = std::make_shared<std::vector<Index>>(std::move(rows));
  return x.tape->record(std::move(out), {x}, [x, idx, cols, in_rows](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (!t.requires_grad(x)) return;
    MatrixMap<Scalar> dX(t.grad_buffer(x).data(), in_rows, cols);
    ConstMatrixMap<Scalar> G(g.data(), static_cast<Index>(idx->size()), cols);
    for (std::size_t i = 0; i < idx->size(); ++i) dX.row((*idx)[i]) += G.row(static_cast<Index>(i));
  });
}

template <class Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b) {
  const Tensor<Scalar>& av = a.value();
  const Tensor<Scalar>& bv = b.value();
  if (av.cols() != bv.cols())
    throw DimensionError("concat_rows: column mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  Vector<Scalar> data(av.size() + bv.size());
  data << av.data(), bv.data();
  const Index na = av.size(), nb = bv.size();
  Tensor<Scalar> out({av.rows() + bv.rows(), av.cols()}, std::move(data));
  return a.tape->record(std::move(out), {a, b}, [a, b, na, nb](Tape<Scalar>& t, const Vector<Scalar>& g) {
    t.accumulate(a, g.head(na));
    t.accumulate(b, g.segment(na, nb));
  });
}

template <class Scalar>
Var<Scalar> concat_cols(Var<Scalar> a, Var<Scalar> b) {
  const Tensor<Scalar>& av = a.value();
  const Tensor<Scalar>& bv = b.value();
  if (av.rows() != bv.rows())
    throw DimensionError("concat_cols: row mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  const Index rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor<Scalar> out({rows, ca + cb});
  out.matrix().leftCols(ca) = av.matrix();
  out.matrix().rightCols(cb) = bv.matrix();
  return a.tape->record(std::move(out), {a, b}, [a, b, rows, ca, cb](Tape<Scalar>& t, const Vector<Scalar>& g) {
    ConstMatrixMap<Scalar> G(g.data(), rows, ca + cb);
    if (t.requires_grad(a)) MatrixMap<Scalar>(t.grad_buffer(a).data(), rows, ca) += G.leftCols(ca);
    if (t.requires_grad(b)) MatrixMap<Scalar>(t.grad_buffer(b).data(), rows, cb) += G.rightCols(cb);
  });
}

template <class Scalar>
Var<Scalar> group_mean_rows(Var<Scalar> x, Index group_size) {
  const Tensor<Scalar>& xv = x.value();
  const Index rows = xv.rows(), cols = xv.cols();
  if (group_size <= 0 || rows % group_size != 0)
    throw DimensionError("group_mean_rows: " + std::to_string(rows) + " rows not divisible into groups of " +
                         std::to_string(group_size));
  const Index groups = rows / group_size;
  Tensor<Scalar> out({groups, cols});
  auto X = xv.matrix();
  auto Y = out.matrix();
  std::vector<Scalar> column(static_cast<std::size_t>(group_size));
  for (Index gi = 0; gi < groups; ++gi) {
    for (Index c = 0; c < cols; ++c) {
      for (Index i = 0; i < group_size; ++i) column[static_cast<std::size_t>(i)] = X(gi * group_size + i, c);
      std::sort(column.begin(), column.end());
      Scalar s = 0;
      for (Scalar v : column) s += v;
      Y(gi, c) = s / static_cast<Scalar>(group_size);
    }
  }
  return x.tape->record(std::move(out), {x}, [x, group_size, groups, cols](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (!t.requires_grad(x)) return;
    ConstMatrixMap<Scalar> G(g.data(), groups, cols);
    MatrixMap<Scalar> dX(t.grad_buffer(x).data(), groups * group_size, cols);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(group_size);
    for (Index gi = 0; gi < groups; ++gi)
      for (Index i = 0; i < group_size; ++i) dX.row(gi * group_size + i) += G.row(gi) * inv;
  });
}

template <class Scalar>
Var<Scalar> grouped_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Index groups, Index heads) {
  const Tensor<Scalar>& qv = q.value();
  const Tensor<Scalar>& kv = k.value();
  const Tensor<Scalar>& vv = v.value();
  const Index d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows())
    throw DimensionError("attention: q " + shape_string(qv.shape()) + ", k " + shape_string(kv.shape()) + ", v " +
                         shape_string(vv.shape()) + " are incompatible");
  if (heads <= 0 || d % heads != 0)
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (groups <= 0 || qv.rows() % groups != 0 || kv.rows() % groups != 0)
    throw DimensionError("attention: rows not divisible into " + std::to_string(groups) + " groups");
  const Index lq = qv.rows() / groups, lk = kv.rows() / groups, dh = d / heads;
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Tensor<Scalar> out({qv.rows(), d});
  auto Q = qv.matrix();
  auto K = kv.matrix();
  auto V = vv.matrix();
  auto O = out.matrix();
  const bool keep = q.tape->recording();
  auto probs = std::make_shared<std::vector<RowMatrix<Scalar>>>();
  if (keep) probs->reserve(static_cast<std::size_t>(groups * heads));
  RowMatrix<Scalar> qh, kh, vh, s;
  for (Index g = 0; g < groups; ++g) {
    for (Index h = 0; h < heads; ++h) {
      qh = Q.block(g * lq, h * dh, lq, dh);
      kh = K.block(g * lk, h * dh, lk, dh);
      vh = V.block(g * lk, h * dh, lk, dh);
      s.noalias() = (qh * kh.transpose()) * sc;
      for (Index r = 0; r < lq; ++r) {
        const Scalar mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      O.block(g * lq, h * dh, lq, dh).noalias() = s * vh;
      if (keep) probs->push_back(s);
    }
  }
  if (!out.data().allFinite()) throw NumericError("attention: non-finite scores");

  return q.tape->record(std::move(out), {q, k, v},
                        [q, k, v, probs, groups, heads, lq, lk, dh, d, sc](Tape<Scalar>& t, const Vector<Scalar>& grad) {
    auto Q = t.value(q).matrix();
    auto K = t.value(k).matrix();
    auto V = t.value(v).matrix();
    ConstMatrixMap<Scalar> G(grad.data(), groups * lq, d);
    const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
    Scalar* dq = gq ? t.grad_buffer(q).data() : nullptr;
    Scalar* dk = gk ? t.grad_buffer(k).data() : nullptr;
    Scalar* dv = gv ? t.grad_buffer(v).data() : nullptr;
    RowMatrix<Scalar> go, dp, ds;
    for (Index g = 0; g < groups; ++g) {
      for (Index h = 0; h < heads; ++h) {
        const RowMatrix<Scalar>& p = (*probs)[static_cast<std::size_t>(g * heads + h)];
        go = G.block(g * lq, h * dh, lq, dh);
        if (gv) MatrixMap<Scalar>(dv, groups * lk, d).block(g * lk, h * dh, lk, dh).noalias() += p.transpose() * go;
        if (!gq && !gk) continue;
        dp.noalias() = go * V.block(g * lk, h * dh, lk, dh).transpose();
        ds = p.cwiseProduct(dp);
        const Vector<Scalar> rs = ds.rowwise().sum();
        ds -= p.cwiseProduct(rs.replicate(1, lk));
        ds *= sc;
        if (gq) MatrixMap<Scalar>(dq, groups * lq, d).block(g * lq, h * dh, lq, dh).noalias() += ds * K.block(g * lk, h * dh, lk, dh);
        if (gk) MatrixMap<Scalar>(dk, groups * lk, d).block(g * lk, h * dh, lk, dh).noalias() += ds.transpose() * Q.block(g * lq, h * dh, lq, dh);
      }
    }
  });
}

template <class Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> labels, Scalar smoothing) {
  const Tensor<Scalar>& lv = logits.value();
  if (lv.rank() != 2) throw DimensionError("cross_entropy: logits must be [batch, classes], got " + shape_string(lv.shape()));
  const Index batch = lv.dim(0), classes = lv.dim(1);
  if (static_cast<Index>(labels.size()) != batch)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(batch));
  if (smoothing < 0 || smoothing >= 1) throw DomainError("cross_entropy: label smoothing must lie in [0, 1)");
  Tensor<Scalar> probs = softmax_rows(lv);
  auto P = probs.matrix();
  auto X = lv.matrix();
  auto target = std::make_shared<RowMatrix<Scalar>>(RowMatrix<Scalar>::Constant(batch, classes, smoothing / classes));
  Scalar loss = 0;
  for (Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) throw DomainError("cross_entropy: label " + std::to_string(y) + " out of range");
    (*target)(b, y) += Scalar(1) - smoothing;
    const Scalar mx = X.row(b).maxCoeff();
    const Scalar lse = mx + std::log((X.row(b).array() - mx).exp().sum());
    loss -= (target->row(b).array() * (X.row(b).array() - lse)).sum();
  }
  loss /= static_cast<Scalar>(batch);
  auto pm = std::make_shared<RowMatrix<Scalar>>(P);
  return logits.tape->record(Tensor<Scalar>::scalar(loss), {logits},
                             [logits, pm, target, batch, classes](Tape<Scalar>& t, const Vector<Scalar>& g) {
    if (!t.requires_grad(logits)) return;
    MatrixMap<Scalar>(t.grad_buffer(logits).data(), batch, classes) += (*pm - *target) * (g[0] / static_cast<Scalar>(batch));
  });
}

template <class Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape<Scalar>& t, const Vector<Scalar>& g) { t.accumulate(x, g); });
}

#define CAST_INSTANTIATE_AUTODIFF(S)                                                              \
  template class Tape<S>;                                                                         \
  template Var<S> matmul(Var<S>, Var<S>);                                                         \
  template Var<S> linear(Var<S>, Var<S>);                                                         \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                                 \
  template Var<S> add(Var<S>, Var<S>);                                                            \
  template Var<S> sub(Var<S>, Var<S>);                                                            \
  template Var<S> mul(Var<S>, Var<S>);                                                            \
  template Var<S> scale(Var<S>, S);                                                               \
  template Var<S> add_indexed_rows(Var<S>, Var<S>, std::vector<Index>);                           \
  template Var<S> sum(Var<S>);                                                                    \
  template Var<S> mean(Var<S>);                                                                   \
  template Var<S> gelu(Var<S>);                                                                   \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                                          \
  template Var<S> softmax_lastdim(Var<S>);                                                        \
  template Var<S> gather_rows(Var<S>, std::vector<Index>);                                        \
  template Var<S> concat_rows(Var<S>, Var<S>);                                                    \
  template Var<S> concat_cols(Var<S>, Var<S>);                                                    \
  template Var<S> group_mean_rows(Var<S>, Index);                                                 \
  template Var<S> grouped_attention(Var<S>, Var<S>, Var<S>, Index, Index);                        \
  template Var<S> cross_entropy(Var<S>, std::span<const int>, S);                                 \
  template Var<S> reshape(Var<S>, Shape);                                                         \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                              \
  template S gelu_value(S);

CAST_INSTANTIATE_AUTODIFF(float)
CAST_INSTANTIATE_AUTODIFF(double)

}  // namespace cast
