#include "cast/attention.hpp"

namespace cast {

template <class Scalar>
WindowLayout window_layout(Window w, const TokenGrid<Scalar>& grid) {
  switch (w) {
    case Window::space:
      return {kFrameMajor, grid.batch * grid.time};
    case Window::time:
      if (grid.has_cls) throw ContractError("time-window attention over a grid with CLS tokens; detach CLS first");
      return {kSpaceMajor, grid.batch * grid.space};
    case Window::space_time:
      return {kFrameMajor, grid.batch};
  }
  throw ConfigError("unknown attention window");
}

namespace {

template <class Scalar>
void check_width(const char* op, Index width, const AttentionParams<Scalar>& p) {
  if (p.w_q.rows() != width || p.w_k.rows() != width || p.w_v.rows() != width)
    throw DimensionError(std::string(op) + ": projections " + shape_string(p.w_q.shape()) + " do not accept width " +
                         std::to_string(width));
}

template <class Scalar>
Var<Scalar> output(Var<Scalar> att, const AttentionParams<Scalar>& p) {
  return p.has_out_proj() ? linear(att, p.w_o, p.b_o) : att;
}

}  // namespace

template <class Scalar>
TokenGrid<Scalar> mhsa(const TokenGrid<Scalar>& x, const AttentionParams<Scalar>& p) {
  check_width("mhsa", x.channels(), p);
  const WindowLayout wl = window_layout(p.window, x);
  TokenGrid<Scalar> xw = reshape_views(x, wl.order);
  Var<Scalar> q = linear(xw.data, p.w_q, p.b_q);
  Var<Scalar> k = linear(xw.data, p.w_k, p.b_k);
  Var<Scalar> v = linear(xw.data, p.w_v, p.b_v);
  xw.data = output(grouped_attention(q, k, v, wl.groups, p.heads), p);
  return reshape_views(xw, x.order);
}

template <class Scalar>
TokenGrid<Scalar> mhca(const TokenGrid<Scalar>& query, const TokenGrid<Scalar>& kv, const AttentionParams<Scalar>& p) {
  if (query.batch != kv.batch || query.time != kv.time || query.space != kv.space || query.has_cls != kv.has_cls)
    throw DimensionError("mhca: query grid (B=" + std::to_string(query.batch) + ", T=" + std::to_string(query.time) +
                         ", N=" + std::to_string(query.space) + ") and key/value grid (B=" + std::to_string(kv.batch) +
                         ", T=" + std::to_string(kv.time) + ", N=" + std::to_string(kv.space) + ") differ");
  if (query.channels() != kv.channels())
    throw DimensionError("mhca: query width " + std::to_string(query.channels()) + " vs key/value width " +
                         std::to_string(kv.channels()));
  check_width("mhca", query.channels(), p);
  const WindowLayout wl = window_layout(p.window, query);
  TokenGrid<Scalar> qw = reshape_views(query, wl.order);
  TokenGrid<Scalar> kw = reshape_views(kv, wl.order);
  Var<Scalar> q = linear(qw.data, p.w_q, p.b_q);
  Var<Scalar> k = linear(kw.data, p.w_k, p.b_k);
  Var<Scalar> v = linear(kw.data, p.w_v, p.b_v);
  qw.data = output(grouped_attention(q, k, v, wl.groups, p.heads), p);
  return reshape_views(qw, query.order);
}

std::vector<std::vector<Index>> attention_support(Window w, Index T, Index N) {
  if (T < 1 || N < 1) throw DomainError("attention_support: T and N must be >= 1");
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(T * N));
  for (Index t = 0; t < T; ++t)
    for (Index n = 0; n < N; ++n) {
      auto& keys = out[static_cast<std::size_t>(t * N + n)];
      switch (w) {
        case Window::space:
          for (Index m = 0; m < N; ++m) keys.push_back(t * N + m);
          break;
        case Window::time:
          for (Index u = 0; u < T; ++u) keys.push_back(u * N + n);
          break;
        case Window::space_time:
          for (Index i = 0; i < T * N; ++i) keys.push_back(i);
          break;
      }
    }
  return out;
}

#define CAST_INSTANTIATE_ATTENTION(S)                                                             \
  template WindowLayout window_layout(Window, const TokenGrid<S>&);                               \
  template TokenGrid<S> mhsa(const TokenGrid<S>&, const AttentionParams<S>&);                     \
  template TokenGrid<S> mhca(const TokenGrid<S>&, const TokenGrid<S>&, const AttentionParams<S>&);

CAST_INSTANTIATE_ATTENTION(float)
CAST_INSTANTIATE_ATTENTION(double)

}  // namespace cast
