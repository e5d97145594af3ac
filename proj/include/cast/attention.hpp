#pragma once

#include "cast/config.hpp"
#include "cast/tokenization.hpp"

#include <vector>

namespace cast {

/// Projections of one attention layer. The output projection is optional
/// (w_o.tape == nullptr disables it).
template <class Scalar>
struct AttentionParams {
  Var<Scalar> w_q, b_q, w_k, b_k, w_v, b_v;
  Var<Scalar> w_o, b_o;
  Index heads = 1;
  Window window = Window::space_time;

  bool has_out_proj() const { return w_o.tape != nullptr; }
};

/// Row order and group count that make every window a contiguous block.
struct WindowLayout {
  std::array<Axis, 3> order;
  Index groups;
};

template <class Scalar>
WindowLayout window_layout(Window w, const TokenGrid<Scalar>& grid);

/// Self-attention restricted to `p.window`; output keeps the input's row order.
/// Scores are scaled by 1/sqrt(head_dim).
template <class Scalar>
TokenGrid<Scalar> mhsa(const TokenGrid<Scalar>& x, const AttentionParams<Scalar>& p);

/// Cross-attention: queries from `query`, keys and values from `kv`, both
/// with the same (batch, time, space) extents and width.
template <class Scalar>
TokenGrid<Scalar> mhca(const TokenGrid<Scalar>& query, const TokenGrid<Scalar>& kv, const AttentionParams<Scalar>& p);

/// Key indices each query may attend to, tokens numbered t * N + n.
std::vector<std::vector<Index>> attention_support(Window w, Index T, Index N);

}  // namespace cast
