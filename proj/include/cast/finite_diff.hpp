#pragma once

#include "cast/parameter.hpp"

#include <cmath>
#include <string>

namespace cast {

/// Central-difference gradient of `f` with respect to every element of `p`.
/// `f` is evaluated with p perturbed in place; p is restored afterwards.
template <class Scalar, class F>
Tensor<Scalar> finite_diff_grad(F&& f, Parameter<Scalar>& p, Scalar eps) {
  if (!(eps > 0)) throw DomainError("finite_diff_grad: eps must be positive");
  Tensor<Scalar> g(p.value.shape());
  for (Index i = 0; i < p.value.size(); ++i) {
    const Scalar saved = p.value[i];
    p.value[i] = saved + eps;
    const Scalar up = f();
    p.value[i] = saved - eps;
    const Scalar down = f();
    p.value[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_grad: non-finite objective while perturbing " + p.name + "[" +
                         std::to_string(i) + "]");
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
template <class Scalar>
Scalar max_relative_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Scalar floor) {
  if (a.shape() != b.shape()) throw DimensionError("max_relative_error: shape mismatch");
  Scalar worst = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace cast
