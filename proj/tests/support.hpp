#pragma once

#include "cast/model.hpp"
#include "cast/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <string>

namespace cast::test {

template <class Scalar = double>
Tensor<Scalar> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<Scalar> t(std::move(shape));
  Rng rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

/// Small two-tower model: 2 blocks, width 32, 4 frames of 16x16 in 8x8 patches.
inline CastConfig toy_config(const std::string& variant = "cast") {
  CastConfig c;
  c.depth = 2;
  c.dim = 32;
  c.heads = 2;
  c.patch = 8;
  c.frames = 4;
  c.height = 16;
  c.width = 16;
  c.appearance_classes = 2;
  c.motion_classes = 2;
  c.num_classes = 4;
  c = apply_variant(c, variant);
  return c;
}

template <class Scalar>
Tensor<Scalar> random_clip(const CastConfig& c, Index batch, std::uint64_t seed) {
  return random_tensor<Scalar>({batch, c.frames, c.height, c.width, c.channels}, seed, 0.0, 1.0);
}

/// Overwrites every learnable parameter with small random values so no
/// gradient path is silenced by zero initialisation.
template <class Scalar>
void randomize_learnable(CastModel<Scalar>& m, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& p : m.params())
    if (!p->frozen)
      for (Index i = 0; i < p->value.size(); ++i)
        p->value[i] += static_cast<Scalar>(scale * rng.uniform(-1.0, 1.0));
}

/// Concatenated logits of every task member for a forward pass without recording.
template <class Scalar>
RowMatrix<Scalar> logits(const CastModel<Scalar>& m, const Tensor<Scalar>& clip) {
  Tape<Scalar> tape(false);
  auto out = m.forward(tape, clip);
  Index cols = 0;
  for (auto& t : out.tasks)
    for (auto& v : t.members) cols += v.cols();
  RowMatrix<Scalar> all(clip.dim(0), cols);
  Index at = 0;
  for (auto& t : out.tasks)
    for (auto& v : t.members) {
      all.middleCols(at, v.cols()) = v.value().matrix();
      at += v.cols();
    }
  return all;
}

template <class A, class B>
bool bitwise_equal(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      {
        const auto x = a(i, j);
        const auto y = b(i, j);
        if (std::memcmp(&x, &y, sizeof(x)) != 0) return false;
      }
  return true;
}

}  // namespace cast::test
