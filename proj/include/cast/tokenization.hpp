#pragma once

#include "cast/autodiff.hpp"

#include <array>
#include <utility>
#include <vector>

namespace cast {

enum class Axis { batch, time, space };

/// Token sequence of one tower stored as a [rows, D] matrix whose row order
/// follows `order` (outermost axis first). Inside a frame the CLS token, when
/// present, sits at space index 0 and patches at 1..space.
template <class Scalar>
struct TokenGrid {
  Var<Scalar> data;
  Index batch = 0;
  Index time = 0;
  Index space = 0;  ///< patch tokens per frame, CLS excluded
  bool has_cls = false;
  std::array<Axis, 3> order = {Axis::batch, Axis::time, Axis::space};

  Index tokens_per_frame() const { return space + (has_cls ? 1 : 0); }
  Index tokens() const { return batch * time * tokens_per_frame(); }
  Index channels() const { return data.cols(); }
  Index extent(Axis a) const { return a == Axis::batch ? batch : a == Axis::time ? time : tokens_per_frame(); }

  /// Row holding token (b, t, s); s counts the CLS slot when present.
  Index row_of(Index b, Index t, Index s) const;
  /// Coordinate along `a` of every row, in row order.
  std::vector<Index> coords(Axis a) const;
};

inline constexpr std::array<Axis, 3> kFrameMajor = {Axis::batch, Axis::time, Axis::space};
inline constexpr std::array<Axis, 3> kSpaceMajor = {Axis::batch, Axis::space, Axis::time};

/// Patch/tube projection plus positional table and (spatial only) CLS token.
template <class Scalar>
struct TokenizerParams {
  Var<Scalar> proj_w;  ///< [patch_len, D]
  Var<Scalar> proj_b;  ///< [D]
  Var<Scalar> pos;     ///< spatial: [N + 1, D], temporal: [T * N, D]
  Var<Scalar> cls;     ///< spatial only: [1, D]
};

/// Validates a clip [B, 2T, H, W, C] against a patch size; throws ConfigError.
void check_clip_shape(const Shape& clip, Index patch);

/// Tokens of the even-indexed frames: per frame one CLS token and
/// (H/p)(W/p) patches flattened as (row, col, channel). The positional table
/// is indexed by in-frame slot and shared across frames.
template <class Scalar>
TokenGrid<Scalar> spatial_tokenize(const Tensor<Scalar>& clip, Index patch, const TokenizerParams<Scalar>& p);

/// Tubes of 2 consecutive frames x p x p pixels flattened as
/// (frame, row, col, channel); positional table indexed by t * N + n.
template <class Scalar>
TokenGrid<Scalar> temporal_tokenize(const Tensor<Scalar>& clip, Index patch, const TokenizerParams<Scalar>& p);

/// Raw pixel rows before projection, exposed for tests.
template <class Scalar>
RowMatrix<Scalar> extract_patches(const Tensor<Scalar>& clip, Index patch);
template <class Scalar>
RowMatrix<Scalar> extract_tubes(const Tensor<Scalar>& clip, Index patch);

/// Row permutation taking a grid in layout `from` to layout `to`:
/// out row i = in row perm[i].
template <class Scalar>
std::vector<Index> view_permutation(const TokenGrid<Scalar>& grid, const std::array<Axis, 3>& to);

/// Reorders rows to the requested axis order; lossless and invertible.
template <class Scalar>
TokenGrid<Scalar> reshape_views(const TokenGrid<Scalar>& grid, const std::array<Axis, 3>& to);

/// Splits off the CLS rows ([B*T, D], frame-major) from the patch tokens.
template <class Scalar>
std::pair<TokenGrid<Scalar>, Var<Scalar>> detach_cls(const TokenGrid<Scalar>& grid);

/// Inverse of detach_cls; the result is frame-major.
template <class Scalar>
TokenGrid<Scalar> attach_cls(const TokenGrid<Scalar>& patches, Var<Scalar> cls);

/// Same layout, new data (e.g. after a row-wise op).
template <class Scalar>
TokenGrid<Scalar> with_data(const TokenGrid<Scalar>& grid, Var<Scalar> data) {
  TokenGrid<Scalar> g = grid;
  if (data.rows() != grid.tokens())
    throw DimensionError("token grid expects " + std::to_string(grid.tokens()) + " rows, got " + std::to_string(data.rows()));
  g.data = data;
  return g;
}

}  // namespace cast
