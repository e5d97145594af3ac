#include "cast/tokenization.hpp"

#include <algorithm>

namespace cast {

template <class Scalar>
Index TokenGrid<Scalar>::row_of(Index b, Index t, Index s) const {
  Index row = 0;
  for (Axis a : order) {
    const Index c = a == Axis::batch ? b : a == Axis::time ? t : s;
    row = row * extent(a) + c;
  }
  return row;
}

template <class Scalar>
std::vector<Index> TokenGrid<Scalar>::coords(Axis a) const {
  std::vector<Index> out(static_cast<std::size_t>(tokens()));
  const Index sp = tokens_per_frame();
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < time; ++t)
      for (Index s = 0; s < sp; ++s)
        out[static_cast<std::size_t>(row_of(b, t, s))] = a == Axis::batch ? b : a == Axis::time ? t : s;
  return out;
}

void check_clip_shape(const Shape& clip, Index patch) {
  if (clip.size() != 5) throw ConfigError("clip must be [B, 2T, H, W, C], got " + shape_string(clip));
  if (clip[1] % 2 != 0) throw ConfigError("clip frame count " + std::to_string(clip[1]) + " is odd; tubes need pairs of frames");
  if (patch <= 0 || clip[2] % patch != 0 || clip[3] % patch != 0)
    throw ConfigError("clip resolution " + std::to_string(clip[2]) + "x" + std::to_string(clip[3]) +
                      " is not divisible by patch size " + std::to_string(patch));
}

namespace {

template <class Scalar>
void copy_patch(const Tensor<Scalar>& clip, Index b, Index f, Index py, Index px, Index patch, Scalar* out) {
  const Index frames = clip.dim(1), h = clip.dim(2), w = clip.dim(3), c = clip.dim(4);
  const Scalar* base = clip.ptr() + ((b * frames + f) * h) * w * c;
  for (Index y = 0; y < patch; ++y) {
    const Scalar* row = base + ((py * patch + y) * w + px * patch) * c;
    std::copy(row, row + patch * c, out + y * patch * c);
  }
}

}  // namespace

template <class Scalar>
RowMatrix<Scalar> extract_patches(const Tensor<Scalar>& clip, Index patch) {
  check_clip_shape(clip.shape(), patch);
  const Index B = clip.dim(0), T = clip.dim(1) / 2, gy = clip.dim(2) / patch, gx = clip.dim(3) / patch, C = clip.dim(4);
  const Index len = patch * patch * C;
  RowMatrix<Scalar> out(B * T * gy * gx, len);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index py = 0; py < gy; ++py)
        for (Index px = 0; px < gx; ++px) {
          const Index r = ((b * T + t) * gy + py) * gx + px;
          copy_patch(clip, b, 2 * t, py, px, patch, out.row(r).data());
        }
  return out;
}

template <class Scalar>
RowMatrix<Scalar> extract_tubes(const Tensor<Scalar>& clip, Index patch) {
  check_clip_shape(clip.shape(), patch);
  const Index B = clip.dim(0), T = clip.dim(1) / 2, gy = clip.dim(2) / patch, gx = clip.dim(3) / patch, C = clip.dim(4);
  const Index len = patch * patch * C;
  RowMatrix<Scalar> out(B * T * gy * gx, 2 * len);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index py = 0; py < gy; ++py)
        for (Index px = 0; px < gx; ++px) {
          const Index r = ((b * T + t) * gy + py) * gx + px;
          copy_patch(clip, b, 2 * t, py, px, patch, out.row(r).data());
          copy_patch(clip, b, 2 * t + 1, py, px, patch, out.row(r).data() + len);
        }
  return out;
}

template <class Scalar>
TokenGrid<Scalar> spatial_tokenize(const Tensor<Scalar>& clip, Index patch, const TokenizerParams<Scalar>& p) {
  RowMatrix<Scalar> pix = extract_patches(clip, patch);
  const Index B = clip.dim(0), T = clip.dim(1) / 2, N = (clip.dim(2) / patch) * (clip.dim(3) / patch);
  const Index D = p.proj_w.cols();
  if (p.pos.rows() != N + 1 || p.pos.cols() != D)
    throw DimensionError("spatial positional table " + shape_string(p.pos.shape()) + " does not fit " +
                         std::to_string(N + 1) + " slots of width " + std::to_string(D));
  if (p.cls.value().size() != D) throw DimensionError("CLS token " + shape_string(p.cls.shape()) + " does not match width " + std::to_string(D));
  Tape<Scalar>& tape = *p.proj_w.tape;
  Var<Scalar> x = tape.constant(Tensor<Scalar>({pix.rows(), pix.cols()}, Eigen::Map<Vector<Scalar>>(pix.data(), pix.size())));
  Var<Scalar> tokens = linear(x, p.proj_w, p.proj_b);
  Var<Scalar> cls_rows = gather_rows(reshape(p.cls, {1, D}), std::vector<Index>(static_cast<std::size_t>(B * T), 0));

  TokenGrid<Scalar> grid;
  grid.batch = B;
  grid.time = T;
  grid.space = N;
  grid.has_cls = true;
  // concat puts patches first (frame-major) then one CLS per frame.
  std::vector<Index> perm(static_cast<std::size_t>(B * T * (N + 1)));
  for (Index f = 0; f < B * T; ++f) {
    perm[static_cast<std::size_t>(f * (N + 1))] = B * T * N + f;
    for (Index n = 0; n < N; ++n) perm[static_cast<std::size_t>(f * (N + 1) + 1 + n)] = f * N + n;
  }
  Var<Scalar> seq = gather_rows(concat_rows(tokens, cls_rows), std::move(perm));
  grid.data = add_indexed_rows(seq, p.pos, grid.coords(Axis::space));
  return grid;
}

template <class Scalar>
TokenGrid<Scalar> temporal_tokenize(const Tensor<Scalar>& clip, Index patch, const TokenizerParams<Scalar>& p) {
  RowMatrix<Scalar> pix = extract_tubes(clip, patch);
  const Index B = clip.dim(0), T = clip.dim(1) / 2, N = (clip.dim(2) / patch) * (clip.dim(3) / patch);
  const Index D = p.proj_w.cols();
  if (p.pos.rows() != T * N || p.pos.cols() != D)
    throw DimensionError("temporal positional table " + shape_string(p.pos.shape()) + " does not fit " +
                         std::to_string(T * N) + " positions of width " + std::to_string(D));
  Tape<Scalar>& tape = *p.proj_w.tape;
  Var<Scalar> x = tape.constant(Tensor<Scalar>({pix.rows(), pix.cols()}, Eigen::Map<Vector<Scalar>>(pix.data(), pix.size())));
  TokenGrid<Scalar> grid;
  grid.batch = B;
  grid.time = T;
  grid.space = N;
  grid.has_cls = false;
  std::vector<Index> pos_index(static_cast<std::size_t>(B * T * N));
  for (Index i = 0; i < B * T * N; ++i) pos_index[static_cast<std::size_t>(i)] = i % (T * N);
  grid.data = add_indexed_rows(linear(x, p.proj_w, p.proj_b), p.pos, std::move(pos_index));
  return grid;
}

template <class Scalar>
std::vector<Index> view_permutation(const TokenGrid<Scalar>& grid, const std::array<Axis, 3>& to) {
  TokenGrid<Scalar> target = grid;
  target.order = to;
  std::vector<Index> perm(static_cast<std::size_t>(grid.tokens()));
  const Index sp = grid.tokens_per_frame();
  for (Index b = 0; b < grid.batch; ++b)
    for (Index t = 0; t < grid.time; ++t)
      for (Index s = 0; s < sp; ++s) perm[static_cast<std::size_t>(target.row_of(b, t, s))] = grid.row_of(b, t, s);
  return perm;
}

template <class Scalar>
TokenGrid<Scalar> reshape_views(const TokenGrid<Scalar>& grid, const std::array<Axis, 3>& to) {
  std::array<Axis, 3> sorted = to;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::array<Axis, 3>{Axis::batch, Axis::time, Axis::space})
    throw DimensionError("reshape_views: target order must name batch, time and space exactly once");
  if (grid.data.rows() != grid.tokens())
    throw DimensionError("reshape_views: grid data has " + std::to_string(grid.data.rows()) + " rows, layout implies " +
                         std::to_string(grid.tokens()));
  if (grid.order == to) return grid;
  TokenGrid<Scalar> out = grid;
  out.order = to;
  out.data = gather_rows(grid.data, view_permutation(grid, to));
  return out;
}

template <class Scalar>
std::pair<TokenGrid<Scalar>, Var<Scalar>> detach_cls(const TokenGrid<Scalar>& grid) {
  if (!grid.has_cls) throw ContractError("detach_cls: grid has no CLS tokens");
  TokenGrid<Scalar> fm = reshape_views(grid, kFrameMajor);
  const Index frames = grid.batch * grid.time, N = grid.space;
  std::vector<Index> cls_rows(static_cast<std::size_t>(frames)), patch_rows(static_cast<std::size_t>(frames * N));
  for (Index f = 0; f < frames; ++f) {
    cls_rows[static_cast<std::size_t>(f)] = f * (N + 1);
    for (Index n = 0; n < N; ++n) patch_rows[static_cast<std::size_t>(f * N + n)] = f * (N + 1) + 1 + n;
  }
  TokenGrid<Scalar> patches = fm;
  patches.has_cls = false;
  patches.data = gather_rows(fm.data, std::move(patch_rows));
  return {patches, gather_rows(fm.data, std::move(cls_rows))};
}

template <class Scalar>
TokenGrid<Scalar> attach_cls(const TokenGrid<Scalar>& patches, Var<Scalar> cls) {
  if (patches.has_cls) throw ContractError("attach_cls: grid already carries CLS tokens");
  const Index frames = patches.batch * patches.time, N = patches.space;
  if (cls.rows() != frames || cls.cols() != patches.channels())
    throw DimensionError("attach_cls: CLS rows " + shape_string(cls.shape()) + " do not match " + std::to_string(frames) +
                         " frames of width " + std::to_string(patches.channels()));
  TokenGrid<Scalar> fm = reshape_views(patches, kFrameMajor);
  std::vector<Index> perm(static_cast<std::size_t>(frames * (N + 1)));
  for (Index f = 0; f < frames; ++f) {
    perm[static_cast<std::size_t>(f * (N + 1))] = f;
    for (Index n = 0; n < N; ++n) perm[static_cast<std::size_t>(f * (N + 1) + 1 + n)] = frames + f * N + n;
  }
  TokenGrid<Scalar> out = fm;
  out.has_cls = true;
  out.data = gather_rows(concat_rows(cls, fm.data), std::move(perm));
  return out;
}

#define CAST_INSTANTIATE_TOKENIZATION(S)                                                              \
  template struct TokenGrid<S>;                                                                       \
  template RowMatrix<S> extract_patches(const Tensor<S>&, Index);                                     \
  template RowMatrix<S> extract_tubes(const Tensor<S>&, Index);                                       \
  template TokenGrid<S> spatial_tokenize(const Tensor<S>&, Index, const TokenizerParams<S>&);         \
  template TokenGrid<S> temporal_tokenize(const Tensor<S>&, Index, const TokenizerParams<S>&);        \
  template std::vector<Index> view_permutation(const TokenGrid<S>&, const std::array<Axis, 3>&);      \
  template TokenGrid<S> reshape_views(const TokenGrid<S>&, const std::array<Axis, 3>&);               \
  template std::pair<TokenGrid<S>, Var<S>> detach_cls(const TokenGrid<S>&);                           \
  template TokenGrid<S> attach_cls(const TokenGrid<S>&, Var<S>);

CAST_INSTANTIATE_TOKENIZATION(float)
CAST_INSTANTIATE_TOKENIZATION(double)

}  // namespace cast
