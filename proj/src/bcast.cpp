#include "cast/bcast.hpp"

#include <cstdio>

namespace cast {

template <class Scalar>
Var<Scalar> adapter(Var<Scalar> x, const AdapterParams<Scalar>& p) {
  return linear(gelu(linear(x, p.w_down, p.b_down)), p.w_up, p.b_up);
}

template <class Scalar>
std::string describe_shape(const char* name, const TokenGrid<Scalar>& g, ShapeView view) {
  const std::string T = std::to_string(g.time);
  const std::string N = g.has_cls ? "(" + std::to_string(g.space) + "+1)" : std::to_string(g.space);
  const std::string d = std::to_string(g.channels());
  std::string body;
  switch (view) {
    case ShapeView::natural:
      body = g.has_cls ? N + "×B·" + T + "×" + d : "B×" + T + "·" + N + "×" + d;
      break;
    case ShapeView::space:
      body = "B·" + T + "×" + N + "×" + d;
      break;
    case ShapeView::time:
      body = "B·" + N + "×" + T + "×" + d;
      break;
    case ShapeView::space_time:
      body = "B×" + T + "·" + N + "×" + d;
      break;
  }
  return std::string(name) + ":" + body;
}

template <class Scalar>
std::vector<Index> window_position_index(const TokenGrid<Scalar>& g, Window w) {
  if (g.has_cls) throw ContractError("positional index requested for a grid with CLS tokens");
  std::vector<Index> t = g.coords(Axis::time);
  if (w == Window::time) return t;
  std::vector<Index> n = g.coords(Axis::space);
  if (w == Window::space) return n;
  for (std::size_t i = 0; i < t.size(); ++i) n[i] += t[i] * g.space;
  return n;
}

Index window_position_count(Window w, Index T, Index N) {
  return w == Window::time ? T : w == Window::space ? N : T * N;
}

namespace {

ShapeView view_of(Window w) {
  return w == Window::time ? ShapeView::time : w == Window::space ? ShapeView::space : ShapeView::space_time;
}

const char* window_name(Window w) {
  return w == Window::time ? "time" : w == Window::space ? "space" : "space-time";
}

std::string ratio_text(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", r);
  return buf;
}

struct Tracer {
  StageTrace* out;
  void add(const char* stage, const char* expert, std::string remark, std::vector<std::string> shapes) {
    if (out) out->push_back({stage, expert, std::move(remark), std::move(shapes)});
  }
};

template <class Scalar>
TokenGrid<Scalar> with_pos(const TokenGrid<Scalar>& g, Var<Scalar> table, Window w) {
  if (!table.tape) return g;
  const Index need = window_position_count(w, g.time, g.space);
  if (table.rows() != need || table.cols() != g.channels())
    throw DimensionError("exchange positional table " + shape_string(table.shape()) + " does not fit " +
                         std::to_string(need) + " positions of width " + std::to_string(g.channels()));
  return with_data(g, add_indexed_rows(g.data, table, window_position_index(g, w)));
}

template <class Scalar>
Var<Scalar> zeros(Tape<Scalar>& tape, Index rows, Index cols) {
  return tape.constant(Tensor<Scalar>({rows, cols}));
}

/// One cross-attention direction: queries from `q`, keys/values from `kv`,
/// both CLS-free and frame-major, with the direction's positional table.
template <class Scalar>
TokenGrid<Scalar> cross(const TokenGrid<Scalar>& q, const TokenGrid<Scalar>& kv, const AttentionParams<Scalar>& attn,
                        Var<Scalar> pos, bool to_spatial, Tracer& tr) {
  const char* expert = to_spatial ? "spatial" : "temporal";
  const char* qn = to_spatial ? "Y_s" : "Y_t";
  const char* kn = to_spatial ? "Y_t" : "Y_s";
  const ShapeView view = view_of(attn.window);
  const std::string reshape = attn.window == Window::time    ? "Reshape: B·N×T×D"
                              : attn.window == Window::space ? "Reshape: B·T×N×D"
                                                             : "Reshape: B×T·N×D";
  tr.add("Pre processing", expert, std::string("Detach CLS token of Y_s; ") + reshape,
         {describe_shape(qn, q, view), describe_shape(kn, kv, view)});
  TokenGrid<Scalar> qp = with_pos(q, pos, attn.window);
  TokenGrid<Scalar> kp = with_pos(kv, pos, attn.window);
  if (pos.tape) {
    tr.add("Positional Embeddings", expert,
           "# parameters: " + std::to_string(pos.rows()) + "×" + std::to_string(pos.cols()),
           {describe_shape(qn, qp, view), describe_shape(kn, kp, view)});
  }
  TokenGrid<Scalar> out = mhca(qp, kp, attn);
  tr.add("Cross-Attention", expert,
         std::string(to_spatial ? "T2S MHCA(Y_s, Y_t)" : "S2T MHCA(Y_t, Y_s)") + "; window shape: " + window_name(attn.window),
         {describe_shape(qn, out, view)});
  return out;
}

template <class Scalar>
void check_inputs(const TokenGrid<Scalar>& y_s, const TokenGrid<Scalar>& y_t) {
  if (!y_s.has_cls) throw ContractError("exchange: spatial tokens must carry CLS tokens");
  if (y_t.has_cls) throw ContractError("exchange: temporal tokens must not carry CLS tokens");
  if (y_s.batch != y_t.batch || y_s.time != y_t.time || y_s.space != y_t.space)
    throw DimensionError("exchange: spatial grid (T=" + std::to_string(y_s.time) + ", N=" + std::to_string(y_s.space) +
                         ") and temporal grid (T=" + std::to_string(y_t.time) + ", N=" + std::to_string(y_t.space) +
                         ") disagree");
}

template <class Scalar>
std::pair<Var<Scalar>, Var<Scalar>> exchange_bcast(const TokenGrid<Scalar>& y_s, const TokenGrid<Scalar>& y_t,
                                                   const ExchangeParams<Scalar>& p, Tracer& tr) {
  const TokenGrid<Scalar> ys = reshape_views(y_s, kFrameMajor);
  const TokenGrid<Scalar> yt = reshape_views(y_t, kFrameMajor);
  const double ratio = static_cast<double>(p.spatial.down_w.cols()) / static_cast<double>(ys.channels());
  auto down = [&](const TokenGrid<Scalar>& g, const ExpertSide<Scalar>& e) {
    return with_data(g, layer_norm(linear(g.data, e.down_w, e.down_b), e.norm_g, e.norm_b, p.norm_eps));
  };
  const TokenGrid<Scalar> ds = down(ys, p.spatial);
  const TokenGrid<Scalar> dt = down(yt, p.temporal);
  tr.add("Down Projection", "spatial", "Linear projection with ratio = " + ratio_text(ratio),
         {describe_shape("Y_s", ds, ShapeView::natural)});
  tr.add("Down Projection", "temporal", "Linear projection with ratio = " + ratio_text(ratio),
         {describe_shape("Y_t", dt, ShapeView::natural)});
  tr.add("Gather Features", "spatial", "Gather Y_t from Temporal Expert",
         {describe_shape("Y_s", ds, ShapeView::natural), describe_shape("Y_t", dt, ShapeView::natural)});
  tr.add("Gather Features", "temporal", "Gather Y_s from Spatial Expert",
         {describe_shape("Y_t", dt, ShapeView::natural), describe_shape("Y_s", ds, ShapeView::natural)});
  auto [ps, cls] = detach_cls(ds);
  const std::string up_ratio = ratio_text(1.0 / ratio);

  Var<Scalar> delta_s, delta_t;
  if (p.t2s) {
    TokenGrid<Scalar> o = cross(ps, dt, p.t2s_attn, p.pos_t2s, true, tr);
    TokenGrid<Scalar> full = attach_cls(o, cls);
    tr.add("Post Processing", "spatial", "Attach CLS token of Y_s; Reshape: N×B·T×D", {describe_shape("Y_s", full, ShapeView::natural)});
    TokenGrid<Scalar> up = with_data(full, linear(gelu(full.data), p.spatial.up_w, p.spatial.up_b));
    tr.add("Up Projection", "spatial", "Linear projection with ratio = " + up_ratio, {describe_shape("Y_s", up, ShapeView::natural)});
    delta_s = reshape_views(up, y_s.order).data;
  }
  if (p.s2t) {
    TokenGrid<Scalar> o = cross(dt, ps, p.s2t_attn, p.pos_s2t, false, tr);
    TokenGrid<Scalar> full = reshape_views(o, kFrameMajor);
    tr.add("Post Processing", "temporal", "Reshape: B×T·N×D", {describe_shape("Y_t", full, ShapeView::natural)});
    TokenGrid<Scalar> up = with_data(full, linear(gelu(full.data), p.temporal.up_w, p.temporal.up_b));
    tr.add("Up Projection", "temporal", "Linear projection with ratio = " + up_ratio, {describe_shape("Y_t", up, ShapeView::natural)});
    delta_t = reshape_views(up, y_t.order).data;
  }
  return {delta_s, delta_t};
}

/// Full-width cross-attention on normalised tokens; with `use_adapter` the
/// result (CLS included) passes through each expert's adapter, otherwise CLS
/// tokens receive an exact zero delta.
template <class Scalar>
std::pair<Var<Scalar>, Var<Scalar>> exchange_full_width(const TokenGrid<Scalar>& y_s, const TokenGrid<Scalar>& y_t,
                                                        const ExchangeParams<Scalar>& p, bool use_adapter,
                                                        Tracer& tr) {
  const TokenGrid<Scalar> ys = reshape_views(y_s, kFrameMajor);
  const TokenGrid<Scalar> yt = reshape_views(y_t, kFrameMajor);
  const TokenGrid<Scalar> ns = with_data(ys, layer_norm(ys.data, p.spatial.norm_g, p.spatial.norm_b, p.norm_eps));
  const TokenGrid<Scalar> nt = with_data(yt, layer_norm(yt.data, p.temporal.norm_g, p.temporal.norm_b, p.norm_eps));
  auto [ps, cls] = detach_cls(ns);
  Var<Scalar> delta_s, delta_t;
  if (p.t2s) {
    TokenGrid<Scalar> o = cross(ps, nt, p.t2s_attn, p.pos_t2s, true, tr);
    Var<Scalar> cls_in = use_adapter ? cls : zeros(*cls.tape, cls.rows(), cls.cols());
    TokenGrid<Scalar> full = attach_cls(o, cls_in);
    if (use_adapter) full.data = adapter(full.data, p.spatial.adapter);
    delta_s = reshape_views(full, y_s.order).data;
  }
  if (p.s2t) {
    TokenGrid<Scalar> o = reshape_views(cross(nt, ps, p.s2t_attn, p.pos_s2t, false, tr), kFrameMajor);
    if (use_adapter) o.data = adapter(o.data, p.temporal.adapter);
    delta_t = reshape_views(o, y_t.order).data;
  }
  return {delta_s, delta_t};
}

template <class Scalar>
std::pair<Var<Scalar>, Var<Scalar>> exchange_lateral(const TokenGrid<Scalar>& y_s, const TokenGrid<Scalar>& y_t,
                                                     const ExchangeParams<Scalar>& p) {
  const TokenGrid<Scalar> ys = reshape_views(y_s, kFrameMajor);
  const TokenGrid<Scalar> yt = reshape_views(y_t, kFrameMajor);
  auto [ps, cls] = detach_cls(ys);
  Var<Scalar> delta_s, delta_t;
  if (p.t2s) {
    TokenGrid<Scalar> moved = with_data(ps, linear(yt.data, p.spatial.lateral_w, p.spatial.lateral_b));
    delta_s = reshape_views(attach_cls(moved, zeros(*cls.tape, cls.rows(), cls.cols())), y_s.order).data;
  }
  if (p.s2t) {
    TokenGrid<Scalar> moved = with_data(yt, linear(ps.data, p.temporal.lateral_w, p.temporal.lateral_b));
    delta_t = reshape_views(moved, y_t.order).data;
  }
  return {delta_s, delta_t};
}

}  // namespace

template <class Scalar>
std::pair<Var<Scalar>, Var<Scalar>> exchange(const TokenGrid<Scalar>& y_s, const TokenGrid<Scalar>& y_t,
                                            const ExchangeParams<Scalar>& p, StageTrace* trace) {
  Tracer tr{trace};
  if (p.kind == ExchangeKind::identity || (!p.t2s && !p.s2t)) return {};
  check_inputs(y_s, y_t);
  switch (p.kind) {
    case ExchangeKind::bcast:
      return exchange_bcast(y_s, y_t, p, tr);
    case ExchangeKind::no_adapter:
      return exchange_full_width(y_s, y_t, p, false, tr);
    case ExchangeKind::xattn_then_adapter:
      return exchange_full_width(y_s, y_t, p, true, tr);
    case ExchangeKind::lateral:
      return exchange_lateral(y_s, y_t, p);
    case ExchangeKind::identity:
      break;
  }
  return {};
}

#define CAST_INSTANTIATE_BCAST(S)                                                                            \
  template Var<S> adapter(Var<S>, const AdapterParams<S>&);                                                  \
  template std::string describe_shape(const char*, const TokenGrid<S>&, ShapeView);                          \
  template std::vector<Index> window_position_index(const TokenGrid<S>&, Window);                            \
  template std::pair<Var<S>, Var<S>> exchange(const TokenGrid<S>&, const TokenGrid<S>&, const ExchangeParams<S>&, \
                                              StageTrace*);

CAST_INSTANTIATE_BCAST(float)
CAST_INSTANTIATE_BCAST(double)

}  // namespace cast
