#pragma once

#include "cast/attention.hpp"

#include <string>
#include <vector>

namespace cast {

/// Bottleneck adapter weights: down [D, r], up [r, D] (up zero-initialised).
template <class Scalar>
struct AdapterParams {
  Var<Scalar> w_down, b_down, w_up, b_up;
};

/// gelu(x W_down + b_down) W_up + b_up, row by row. The caller adds the residual.
template <class Scalar>
Var<Scalar> adapter(Var<Scalar> x, const AdapterParams<Scalar>& p);

/// One expert's side of an exchange module. Which members are set depends on
/// the exchange kind: bcast uses down/norm/up, no_adapter uses the norm only,
/// xattn_then_adapter uses the norm plus `adapter`, lateral uses `lateral_w/b`.
template <class Scalar>
struct ExpertSide {
  Var<Scalar> down_w, down_b;
  Var<Scalar> norm_g, norm_b;
  Var<Scalar> up_w, up_b;
  AdapterParams<Scalar> adapter;
  Var<Scalar> lateral_w, lateral_b;  ///< projects the partner's co-located tokens
};

template <class Scalar>
struct ExchangeParams {
  ExchangeKind kind = ExchangeKind::identity;
  bool t2s = true;  ///< temporal -> spatial (delta for the spatial tower)
  bool s2t = true;  ///< spatial -> temporal (delta for the temporal tower)
  Scalar norm_eps = Scalar(1e-6);
  ExpertSide<Scalar> spatial, temporal;
  AttentionParams<Scalar> t2s_attn, s2t_attn;  ///< windows live in the params
  Var<Scalar> pos_t2s, pos_s2t;                ///< unset when positional tables are disabled
};

/// One row of the stage-by-stage account of an exchange: which expert, what
/// was done and the shapes of the tensors produced, written as in
/// "(196+1)×B·8×384" (tokens per frame x batch·frames x width).
struct StageRecord {
  std::string stage;
  std::string expert;
  std::string remark;
  std::vector<std::string> shapes;
};
using StageTrace = std::vector<StageRecord>;

/// Layout notation for a grid: "natural" prints a CLS grid as (N+1)×B·T×d and
/// a patch grid as B×T·N×d; a window prints the window-major view.
enum class ShapeView { natural, space, time, space_time };
template <class Scalar>
std::string describe_shape(const char* name, const TokenGrid<Scalar>& g, ShapeView view);

/// Positional-table row used by each token of a CLS-free grid under `w`:
/// time -> t, space -> n, space_time -> t * N + n.
template <class Scalar>
std::vector<Index> window_position_index(const TokenGrid<Scalar>& g, Window w);
Index window_position_count(Window w, Index T, Index N);

/// Residual deltas for both towers. `y_s` must carry CLS tokens, `y_t` must
/// not; deltas come back in the row order of their inputs. A direction that
/// is disabled, or the identity kind, yields an unset Var (tape == nullptr).
template <class Scalar>
std::pair<Var<Scalar>, Var<Scalar>> exchange(const TokenGrid<Scalar>& y_s, const TokenGrid<Scalar>& y_t,
                                            const ExchangeParams<Scalar>& p, StageTrace* trace = nullptr);

}  // namespace cast
