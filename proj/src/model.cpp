#include "cast/model.hpp"

#include "cast/rng.hpp"

#include <cmath>

namespace cast {

std::vector<TaskSpec> task_specs(const CastConfig& cfg) {
  if (cfg.head == HeadKind::dual) return {{"appearance", cfg.appearance_classes}, {"motion", cfg.motion_classes}};
  return {{"action", cfg.num_classes}};
}

namespace {

enum Init { kZero, kOne, kFrozenWeight, kTrunc };

constexpr double kLearnableStd = 0.02;
constexpr double kFrozenPosStd = 0.2;
// Standardisation folded into the frozen patch projections: tokens see
// (pixel - mean) / std, as pre-trained vision towers do.
constexpr double kPixelMean = 0.45;
constexpr double kPixelStd = 0.225;

template <class Scalar>
Var<Scalar> v(Tape<Scalar>& tape, const Parameter<Scalar>* p) {
  return p ? tape.param(*p) : Var<Scalar>{};
}

std::string block_name(const std::string& tower, int layer) { return tower + ".block" + std::to_string(layer); }

}  // namespace

template <class Scalar>
typename CastModel<Scalar>::P* CastModel<Scalar>::add_param(const std::string& name, Shape shape, bool frozen, int layer_id,
                                                      bool decay, int init, double std) {
  Tensor<Scalar> value(shape);
  Rng rng(mix_seed(cfg_.seed, fnv1a(name)));
  switch (init) {
    case kZero:
      break;
    case kOne:
      value.data().setOnes();
      break;
    case kFrozenWeight: {
      const double s = cfg_.frozen_init_std > 0 ? cfg_.frozen_init_std : 1.0 / std::sqrt(static_cast<double>(shape[0]));
      for (Index i = 0; i < value.size(); ++i) value[i] = static_cast<Scalar>(s * rng.normal());
      break;
    }
    case kTrunc:
      for (Index i = 0; i < value.size(); ++i) value[i] = static_cast<Scalar>(rng.trunc_normal(std));
      break;
  }
  return &store_.add(name, std::move(value), frozen, layer_id, decay);
}

template <class Scalar>
typename CastModel<Scalar>::AttnRefs CastModel<Scalar>::add_attention(const std::string& prefix, Index in, Index width,
                                                                      bool frozen, int layer_id, bool out_proj,
                                                                      bool zero_out) {
  const int winit = frozen ? kFrozenWeight : kTrunc;
  AttnRefs a;
  a.q_w = add_param(prefix + ".q.weight", {in, width}, frozen, layer_id, true, winit, kLearnableStd);
  a.q_b = add_param(prefix + ".q.bias", {width}, frozen, layer_id, false, kZero);
  a.k_w = add_param(prefix + ".k.weight", {in, width}, frozen, layer_id, true, winit, kLearnableStd);
  a.k_b = add_param(prefix + ".k.bias", {width}, frozen, layer_id, false, kZero);
  a.v_w = add_param(prefix + ".v.weight", {in, width}, frozen, layer_id, true, winit, kLearnableStd);
  a.v_b = add_param(prefix + ".v.bias", {width}, frozen, layer_id, false, kZero);
  if (out_proj) {
    a.o_w = add_param(prefix + ".o.weight", {width, width}, frozen, layer_id, true, zero_out ? kZero : winit, kLearnableStd);
    a.o_b = add_param(prefix + ".o.bias", {width}, frozen, layer_id, false, kZero);
  }
  return a;
}

template <class Scalar>
typename CastModel<Scalar>::AdapterRefs CastModel<Scalar>::add_adapter(const std::string& prefix, Index in,
                                                                       Index hidden, int layer_id, bool zero_up) {
  AdapterRefs a;
  a.down_w = add_param(prefix + ".down.weight", {in, hidden}, false, layer_id, true, kTrunc, kLearnableStd);
  a.down_b = add_param(prefix + ".down.bias", {hidden}, false, layer_id, false, kZero);
  a.up_w = add_param(prefix + ".up.weight", {hidden, in}, false, layer_id, true, zero_up ? kZero : kTrunc, kLearnableStd);
  a.up_b = add_param(prefix + ".up.bias", {in}, false, layer_id, false, kZero);
  return a;
}

template <class Scalar>
void CastModel<Scalar>::build_tower(Tower& tower, const std::string& name, bool spatial) {
  const bool frozen = !cfg_.full_finetune;
  const Index D = cfg_.dim, T = cfg_.time_steps(), N = cfg_.patches();
  const Index patch_len = static_cast<Index>(cfg_.patch) * cfg_.patch * cfg_.channels * (spatial ? 1 : 2);
  tower.patch_w = add_param(name + ".patch_embed.weight", {patch_len, D}, frozen, 0, true, kFrozenWeight);
  tower.patch_b = add_param(name + ".patch_embed.bias", {D}, frozen, 0, false, kZero);
  tower.patch_w->value.data() /= static_cast<Scalar>(kPixelStd);
  tower.patch_b->value.matrix() =
      -static_cast<Scalar>(kPixelMean) * tower.patch_w->value.matrix().colwise().sum().reshaped(1, D);
  tower.pos = add_param(name + ".pos_embed", {spatial ? N + 1 : T * N, D}, frozen, 0, false, kTrunc, kFrozenPosStd);
  if (spatial)
    tower.cls = add_param(name + ".cls_token", {1, D}, frozen, 0, false, cfg_.random_cls ? kTrunc : kZero, kLearnableStd);

  const Arch arch = spatial ? cfg_.spatial_arch : cfg_.temporal_arch;
  const Index hidden = static_cast<Index>(cfg_.mlp_ratio) * D;
  for (int l = 1; l <= cfg_.depth; ++l) {
    const std::string b = block_name(name, l);
    TowerBlock blk;
    blk.window = arch == Arch::clip ? Window::space : Window::space_time;
    blk.divided = arch == Arch::videomae && cfg_.temporal_attention == TemporalAttention::divided;
    blk.norm1_w = add_param(b + ".norm1.weight", {D}, frozen, l, false, kOne);
    blk.norm1_b = add_param(b + ".norm1.bias", {D}, frozen, l, false, kZero);
    blk.attn = add_attention(b + ".attn", D, D, frozen, l, true, false);
    if (blk.divided) blk.attn_time = add_attention(b + ".attn_time", D, D, frozen, l, true, false);
    blk.norm2_w = add_param(b + ".norm2.weight", {D}, frozen, l, false, kOne);
    blk.norm2_b = add_param(b + ".norm2.bias", {D}, frozen, l, false, kZero);
    blk.fc1_w = add_param(b + ".mlp.fc1.weight", {D, hidden}, frozen, l, true, kFrozenWeight);
    blk.fc1_b = add_param(b + ".mlp.fc1.bias", {hidden}, frozen, l, false, kZero);
    blk.fc2_w = add_param(b + ".mlp.fc2.weight", {hidden, D}, frozen, l, true, kFrozenWeight);
    blk.fc2_b = add_param(b + ".mlp.fc2.bias", {D}, frozen, l, false, kZero);
    if (cfg_.adapters) {
      blk.adapter_attn = add_adapter(b + ".adapter_attn", D, cfg_.adapter_dim(), l, true);
      blk.adapter_mlp = add_adapter(b + ".adapter_mlp", D, cfg_.adapter_dim(), l, true);
    }
    tower.blocks.push_back(blk);
  }
  tower.norm_w = add_param(name + ".norm.weight", {D}, false, cfg_.depth + 1, false, kOne);
  tower.norm_b = add_param(name + ".norm.bias", {D}, false, cfg_.depth + 1, false, kZero);
}

template <class Scalar>
void CastModel<Scalar>::build_exchange(int l) {
  ExchangeRefs ex;
  if (!cfg_.exchanges_at(l)) {
    exchanges_.push_back(ex);
    return;
  }
  ex.present = true;
  const Index D = cfg_.dim, d = cfg_.bottleneck_dim(), T = cfg_.time_steps(), N = cfg_.patches();
  for (int side = 0; side < 2; ++side) {
    const bool spatial = side == 0;
    const bool receives = spatial ? cfg_.t2s_enabled() : cfg_.s2t_enabled();
    const Window w = spatial ? cfg_.t2s_window : cfg_.s2t_window;
    const std::string tower = spatial ? "spatial" : "temporal";
    const std::string dir = spatial ? "t2s" : "s2t";
    SideRefs& s = spatial ? ex.spatial : ex.temporal;
    switch (cfg_.exchange) {
      case ExchangeKind::bcast: {
        const std::string p = block_name(tower, l) + ".bcast";
        s.down_w = add_param(p + ".down_proj.weight", {D, d}, false, l, true, kTrunc, kLearnableStd);
        s.down_b = add_param(p + ".down_proj.bias", {d}, false, l, false, kZero);
        s.norm_g = add_param(p + ".norm.weight", {d}, false, l, false, kOne);
        s.norm_b = add_param(p + ".norm.bias", {d}, false, l, false, kZero);
        if (receives) {
          s.attn = add_attention(p + "." + dir, d, d, false, l, cfg_.out_proj, false);
          if (cfg_.bcast_positional) s.pos = add_param(p + ".pos_embed", {window_position_count(w, T, N), d}, false, l, false, kTrunc, kLearnableStd);
          s.up_w = add_param(p + ".up_proj.weight", {d, D}, false, l, true, kZero);
          s.up_b = add_param(p + ".up_proj.bias", {D}, false, l, false, kZero);
        }
        break;
      }
      case ExchangeKind::no_adapter:
      case ExchangeKind::xattn_then_adapter: {
        const bool with_adapter = cfg_.exchange == ExchangeKind::xattn_then_adapter;
        const std::string p = block_name(tower, l) + ".xattn";
        s.norm_g = add_param(p + ".norm.weight", {D}, false, l, false, kOne);
        s.norm_b = add_param(p + ".norm.bias", {D}, false, l, false, kZero);
        if (receives) {
          s.attn = add_attention(p + "." + dir, D, D, false, l, cfg_.out_proj, !with_adapter);
          if (cfg_.bcast_positional) s.pos = add_param(p + ".pos_embed", {window_position_count(w, T, N), D}, false, l, false, kTrunc, kLearnableStd);
          if (with_adapter) s.adapter = add_adapter(p + ".adapter", D, d, l, true);
        }
        break;
      }
      case ExchangeKind::lateral: {
        if (receives) {
          const std::string p = block_name(tower, l) + ".lateral";
          s.lateral_w = add_param(p + ".weight", {D, D}, false, l, true, kZero);
          s.lateral_b = add_param(p + ".bias", {D}, false, l, false, kZero);
        }
        break;
      }
      case ExchangeKind::identity:
        break;
    }
  }
  exchanges_.push_back(ex);
}

template <class Scalar>
void CastModel<Scalar>::build_heads() {
  const Index D = cfg_.dim, r = cfg_.adapter_dim();
  const int lid = cfg_.depth + 1;
  const bool fused = cfg_.fusion == Fusion::late_add || cfg_.fusion == Fusion::late_concat ||
                     (cfg_.fusion == Fusion::cast && cfg_.head == HeadKind::single);
  if (fused && cfg_.adapters) {
    heads_.spatial_adapter = add_adapter("head.spatial_adapter", D, r, lid, false);
    heads_.temporal_adapter = add_adapter("head.temporal_adapter", D, r, lid, false);
  }
  if (cfg_.fusion == Fusion::late_concat) {
    heads_.fuse_w = add_param("head.fuse.weight", {2 * D, D}, false, lid, true, kTrunc, kLearnableStd);
    heads_.fuse_b = add_param("head.fuse.bias", {D}, false, lid, false, kZero);
  }
  for (const TaskSpec& t : tasks_) {
    typename HeadRefs::Task task;
    const Index C = t.classes;
    if (cfg_.fusion == Fusion::ensemble) {
      const std::string ps = "head.spatial." + t.name, pt = "head.temporal." + t.name;
      if (cfg_.adapters) {
        task.adapter = add_adapter(ps + ".adapter", D, r, lid, false);
        task.t_adapter = add_adapter(pt + ".adapter", D, r, lid, false);
      }
      task.fc_w = add_param(ps + ".fc.weight", {D, C}, false, lid, true, kTrunc, kLearnableStd);
      task.fc_b = add_param(ps + ".fc.bias", {C}, false, lid, false, kZero);
      task.t_fc_w = add_param(pt + ".fc.weight", {D, C}, false, lid, true, kTrunc, kLearnableStd);
      task.t_fc_b = add_param(pt + ".fc.bias", {C}, false, lid, false, kZero);
    } else {
      const std::string p = "head." + t.name;
      if (!fused && cfg_.adapters) task.adapter = add_adapter(p + ".adapter", D, r, lid, false);
      task.fc_w = add_param(p + ".fc.weight", {D, C}, false, lid, true, kTrunc, kLearnableStd);
      task.fc_b = add_param(p + ".fc.bias", {C}, false, lid, false, kZero);
    }
    heads_.tasks.push_back(task);
  }
}

template <class Scalar>
CastModel<Scalar>::CastModel(const CastConfig& cfg) : cfg_(cfg), tasks_(task_specs(cfg)) {
  cfg_.validate();
  if (cfg_.has_spatial()) build_tower(spatial_, "spatial", true);
  if (cfg_.has_temporal()) build_tower(temporal_, "temporal", false);
  for (int l = 1; l <= cfg_.depth; ++l) build_exchange(l);
  build_heads();
}

template <class Scalar>
TokenGrid<Scalar> CastModel<Scalar>::tokenize_spatial(Tape<Scalar>& tape, const Tensor<Scalar>& clip) const {
  TokenizerParams<Scalar> p{v(tape, spatial_.patch_w), v(tape, spatial_.patch_b), v(tape, spatial_.pos), v(tape, spatial_.cls)};
  return spatial_tokenize(clip, cfg_.patch, p);
}

template <class Scalar>
TokenGrid<Scalar> CastModel<Scalar>::tokenize_temporal(Tape<Scalar>& tape, const Tensor<Scalar>& clip) const {
  TokenizerParams<Scalar> p{v(tape, temporal_.patch_w), v(tape, temporal_.patch_b), v(tape, temporal_.pos), {}};
  return temporal_tokenize(clip, cfg_.patch, p);
}

namespace {

template <class Scalar, class Refs>
AttentionParams<Scalar> attn_vars(Tape<Scalar>& tape, const Refs& a, Index heads, Window w) {
  AttentionParams<Scalar> p;
  p.w_q = v(tape, a.q_w);
  p.b_q = v(tape, a.q_b);
  p.w_k = v(tape, a.k_w);
  p.b_k = v(tape, a.k_b);
  p.w_v = v(tape, a.v_w);
  p.b_v = v(tape, a.v_b);
  p.w_o = v(tape, a.o_w);
  p.b_o = v(tape, a.o_b);
  p.heads = heads;
  p.window = w;
  return p;
}

template <class Scalar, class Refs>
AdapterParams<Scalar> adapter_vars(Tape<Scalar>& tape, const Refs& a) {
  return {v(tape, a.down_w), v(tape, a.down_b), v(tape, a.up_w), v(tape, a.up_b)};
}

constexpr double kNormEps = 1e-6;

}  // namespace

template <class Scalar>
TokenGrid<Scalar> CastModel<Scalar>::attention_stage(Tape<Scalar>& tape, const TokenGrid<Scalar>& x, bool spatial,
                                                     int layer) const {
  const TowerBlock& blk = (spatial ? spatial_ : temporal_).blocks.at(static_cast<std::size_t>(layer - 1));
  const Scalar eps = static_cast<Scalar>(kNormEps);
  TokenGrid<Scalar> h = with_data(x, layer_norm(x.data, v(tape, blk.norm1_w), v(tape, blk.norm1_b), eps));
  Var<Scalar> a;
  if (blk.divided) {
    TokenGrid<Scalar> t = mhsa(h, attn_vars(tape, blk.attn_time, cfg_.heads, Window::time));
    TokenGrid<Scalar> s = mhsa(with_data(h, add(h.data, t.data)), attn_vars(tape, blk.attn, cfg_.heads, Window::space));
    a = add(t.data, s.data);
  } else {
    a = mhsa(h, attn_vars(tape, blk.attn, cfg_.heads, blk.window)).data;
  }
  Var<Scalar> y = add(x.data, a);
  if (cfg_.adapters) y = add(y, adapter(a, adapter_vars(tape, blk.adapter_attn)));
  return with_data(x, y);
}

template <class Scalar>
TokenGrid<Scalar> CastModel<Scalar>::mlp_stage(Tape<Scalar>& tape, const TokenGrid<Scalar>& b, bool spatial,
                                               int layer) const {
  const TowerBlock& blk = (spatial ? spatial_ : temporal_).blocks.at(static_cast<std::size_t>(layer - 1));
  Var<Scalar> h = layer_norm(b.data, v(tape, blk.norm2_w), v(tape, blk.norm2_b), static_cast<Scalar>(kNormEps));
  Var<Scalar> f = linear(gelu(linear(h, v(tape, blk.fc1_w), v(tape, blk.fc1_b))), v(tape, blk.fc2_w), v(tape, blk.fc2_b));
  Var<Scalar> out = add(b.data, f);
  if (cfg_.adapters) out = add(out, adapter(h, adapter_vars(tape, blk.adapter_mlp)));
  return with_data(b, out);
}

template <class Scalar>
ExchangeParams<Scalar> CastModel<Scalar>::exchange_params(Tape<Scalar>& tape, int layer) const {
  const ExchangeRefs& ex = exchange_refs(layer);
  ExchangeParams<Scalar> p;
  p.kind = ex.present ? cfg_.exchange : ExchangeKind::identity;
  p.t2s = cfg_.t2s_enabled();
  p.s2t = cfg_.s2t_enabled();
  p.norm_eps = static_cast<Scalar>(kNormEps);
  auto side = [&](const SideRefs& s) {
    ExpertSide<Scalar> e;
    e.down_w = v(tape, s.down_w);
    e.down_b = v(tape, s.down_b);
    e.norm_g = v(tape, s.norm_g);
    e.norm_b = v(tape, s.norm_b);
    e.up_w = v(tape, s.up_w);
    e.up_b = v(tape, s.up_b);
    e.adapter = adapter_vars(tape, s.adapter);
    e.lateral_w = v(tape, s.lateral_w);
    e.lateral_b = v(tape, s.lateral_b);
    return e;
  };
  if (!ex.present) return p;
  p.spatial = side(ex.spatial);
  p.temporal = side(ex.temporal);
  if (p.t2s) {
    p.t2s_attn = attn_vars(tape, ex.spatial.attn, cfg_.heads, cfg_.t2s_window);
    p.pos_t2s = v(tape, ex.spatial.pos);
  }
  if (p.s2t) {
    p.s2t_attn = attn_vars(tape, ex.temporal.attn, cfg_.heads, cfg_.s2t_window);
    p.pos_s2t = v(tape, ex.temporal.pos);
  }
  return p;
}

template <class Scalar>
std::pair<TokenGrid<Scalar>, TokenGrid<Scalar>> CastModel<Scalar>::block_forward(Tape<Scalar>& tape,
                                                                                 const TokenGrid<Scalar>& x_s,
                                                                                 const TokenGrid<Scalar>& x_t, int layer,
                                                                                 StageTrace* trace) const {
  TokenGrid<Scalar> y_s, y_t;
  if (cfg_.has_spatial()) y_s = attention_stage(tape, x_s, true, layer);
  if (cfg_.has_temporal()) y_t = attention_stage(tape, x_t, false, layer);
  if (cfg_.exchanges_at(layer)) {
    auto [ds, dt] = exchange(y_s, y_t, exchange_params(tape, layer), trace);
    if (ds.tape) y_s.data = add(y_s.data, ds);
    if (dt.tape) y_t.data = add(y_t.data, dt);
  }
  TokenGrid<Scalar> o_s, o_t;
  if (cfg_.has_spatial()) o_s = mlp_stage(tape, y_s, true, layer);
  if (cfg_.has_temporal()) o_t = mlp_stage(tape, y_t, false, layer);
  return {o_s, o_t};
}

template <class Scalar>
Var<Scalar> CastModel<Scalar>::spatial_feature(Tape<Scalar>& tape, const TokenGrid<Scalar>& x_s) const {
  Var<Scalar> cls = detach_cls(x_s).second;
  Var<Scalar> n = layer_norm(cls, v(tape, spatial_.norm_w), v(tape, spatial_.norm_b), static_cast<Scalar>(kNormEps));
  return group_mean_rows(n, x_s.time);
}

template <class Scalar>
Var<Scalar> CastModel<Scalar>::temporal_feature(Tape<Scalar>& tape, const TokenGrid<Scalar>& x_t) const {
  TokenGrid<Scalar> fm = reshape_views(x_t, kFrameMajor);
  Var<Scalar> gap = group_mean_rows(fm.data, x_t.time * x_t.space);
  return layer_norm(gap, v(tape, temporal_.norm_w), v(tape, temporal_.norm_b), static_cast<Scalar>(kNormEps));
}

template <class Scalar>
ModelOutput<Scalar> CastModel<Scalar>::classify(Tape<Scalar>& tape, Var<Scalar> f_s, Var<Scalar> f_t) const {
  auto adapt = [&](Var<Scalar> f, const AdapterRefs& a) {
    return cfg_.adapters ? adapter(f, adapter_vars(tape, a)) : f;
  };
  ModelOutput<Scalar> out;
  const bool fused = cfg_.fusion == Fusion::late_add || cfg_.fusion == Fusion::late_concat ||
                     (cfg_.fusion == Fusion::cast && cfg_.head == HeadKind::single);
  Var<Scalar> z;
  if (fused) {
    Var<Scalar> zs = adapt(f_s, heads_.spatial_adapter);
    Var<Scalar> zt = adapt(f_t, heads_.temporal_adapter);
    z = cfg_.fusion == Fusion::late_concat ? linear(concat_cols(zs, zt), v(tape, heads_.fuse_w), v(tape, heads_.fuse_b))
                                           : add(zs, zt);
  }
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    const auto& h = heads_.tasks[i];
    TaskOutput<Scalar> t;
    t.name = tasks_[i].name;
    auto fc = [&](Var<Scalar> f) { return linear(f, v(tape, h.fc_w), v(tape, h.fc_b)); };
    switch (cfg_.fusion) {
      case Fusion::ensemble:
        t.members.push_back(fc(adapt(f_s, h.adapter)));
        t.members.push_back(linear(adapt(f_t, h.t_adapter), v(tape, h.t_fc_w), v(tape, h.t_fc_b)));
        break;
      case Fusion::spatial_only:
        t.members.push_back(fc(adapt(f_s, h.adapter)));
        break;
      case Fusion::temporal_only:
        t.members.push_back(fc(adapt(f_t, h.adapter)));
        break;
      default:
        if (fused) {
          t.members.push_back(fc(z));
        } else {
          // Dual head: appearance reads the spatial CLS path, motion the temporal GAP path.
          t.members.push_back(fc(adapt(i == 0 ? f_s : f_t, h.adapter)));
        }
    }
    out.tasks.push_back(std::move(t));
  }
  return out;
}

template <class Scalar>
ModelOutput<Scalar> CastModel<Scalar>::forward(Tape<Scalar>& tape, const Tensor<Scalar>& clip, StageTrace* trace,
                                               int trace_block) const {
  check_clip_shape(clip.shape(), cfg_.patch);
  if (clip.dim(1) != cfg_.frames || clip.dim(2) != cfg_.height || clip.dim(3) != cfg_.width || clip.dim(4) != cfg_.channels)
    throw DimensionError("clip " + shape_string(clip.shape()) + " does not match the configured [B, " +
                         std::to_string(cfg_.frames) + ", " + std::to_string(cfg_.height) + ", " +
                         std::to_string(cfg_.width) + ", " + std::to_string(cfg_.channels) + "]");
  forwards_ += static_cast<std::uint64_t>(clip.dim(0));
  TokenGrid<Scalar> x_s, x_t;
  if (cfg_.has_spatial()) x_s = tokenize_spatial(tape, clip);
  if (cfg_.has_temporal()) x_t = tokenize_temporal(tape, clip);
  for (int l = 1; l <= cfg_.depth; ++l) std::tie(x_s, x_t) = block_forward(tape, x_s, x_t, l, l == trace_block ? trace : nullptr);
  Var<Scalar> f_s = cfg_.has_spatial() ? spatial_feature(tape, x_s) : Var<Scalar>{};
  Var<Scalar> f_t = cfg_.has_temporal() ? temporal_feature(tape, x_t) : Var<Scalar>{};
  return classify(tape, f_s, f_t);
}

template class CastModel<float>;
template class CastModel<double>;

}  // namespace cast
