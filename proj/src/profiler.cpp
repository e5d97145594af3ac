#include "cast/profiler.hpp"

#include "cast/hashing.hpp"
#include "cast/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <map>

namespace cast {

namespace {

using I64 = std::int64_t;

I64 pairs(Window w, I64 T, I64 S) {
  switch (w) {
    case Window::space:
      return T * S * S;
    case Window::time:
      return S * T * T;
    case Window::space_time:
      break;
  }
  return (T * S) * (T * S);
}

I64 positions(Window w, I64 T, I64 N) { return w == Window::time ? T : w == Window::space ? N : T * N; }

struct Counter {
  const CastConfig& c;
  const CostAssumptions& a;

  I64 bias(I64 n) const { return a.include_biases ? n : 0; }
  I64 lin(I64 in, I64 out) const { return in * out + bias(out); }
  I64 attn(I64 w, bool out) const { return 3 * lin(w, w) + (out ? lin(w, w) : 0); }
  I64 adapter(I64 d, I64 r) const { return lin(d, r) + lin(r, d); }
  I64 norm(I64 w) const { return 2 * w; }
  I64 mac(I64 n) const { return n * a.flops_per_mac; }
};

CostRow tower_embed(const Counter& k, bool spatial) {
  const CastConfig& c = k.c;
  const I64 D = c.dim, T = c.time_steps(), N = c.patches();
  const I64 patch_len = I64(c.patch) * c.patch * c.channels * (spatial ? 1 : 2);
  CostRow r{spatial ? "spatial.embed" : "temporal.embed"};
  const I64 n = k.lin(patch_len, D) + (spatial ? (N + 1) * D + D : T * N * D);
  (c.full_finetune ? r.learnable : r.frozen) = n;
  r.flops = k.mac(T * N * patch_len * D);
  return r;
}

CostRow tower_block(const Counter& k, bool spatial, int l) {
  const CastConfig& c = k.c;
  const I64 D = c.dim, T = c.time_steps(), N = c.patches(), h = I64(c.mlp_ratio) * D, r = c.adapter_dim();
  const I64 S = spatial ? N + 1 : N, M = T * S;
  const Arch arch = spatial ? c.spatial_arch : c.temporal_arch;
  const bool divided = arch == Arch::videomae && c.temporal_attention == TemporalAttention::divided;
  const Window w = spatial ? c.spatial_self_window() : c.temporal_self_window();
  CostRow row{std::string(spatial ? "spatial" : "temporal") + ".block" + std::to_string(l)};
  I64 frozen = 2 * k.norm(D) + k.attn(D, true) + k.lin(D, h) + k.lin(h, D);
  I64 macs = 4 * M * D * D + 2 * M * D * h;
  if (divided) {
    frozen += k.attn(D, true);
    macs += 4 * M * D * D + 2 * (pairs(Window::time, T, S) + pairs(Window::space, T, S)) * D;
  } else {
    macs += 2 * pairs(w, T, S) * D;
  }
  (c.full_finetune ? row.learnable : row.frozen) = frozen;
  if (c.adapters) {
    row.learnable += 2 * k.adapter(D, r);
    macs += 2 * 2 * M * D * r;
  }
  row.flops = k.mac(macs);
  return row;
}

CostRow exchange_block(const Counter& k, int l) {
  const CastConfig& c = k.c;
  const I64 D = c.dim, T = c.time_steps(), N = c.patches(), d = c.bottleneck_dim();
  const I64 Ms = T * (N + 1), Mt = T * N;
  CostRow row{"exchange.block" + std::to_string(l)};
  I64 params = 0, macs = 0;
  const I64 proj = c.out_proj ? 4 : 3;
  for (int side = 0; side < 2; ++side) {
    const bool spatial = side == 0;
    const bool receives = spatial ? c.t2s_enabled() : c.s2t_enabled();
    const Window w = spatial ? c.t2s_window : c.s2t_window;
    const I64 own = spatial ? Ms : Mt;
    switch (c.exchange) {
      case ExchangeKind::bcast:
        params += k.lin(D, d) + k.norm(d);
        macs += own * D * d;
        if (receives) {
          params += k.attn(d, c.out_proj) + (c.bcast_positional ? positions(w, T, N) * d : 0) + k.lin(d, D);
          macs += proj * Mt * d * d + 2 * pairs(w, T, N) * d + own * d * D;
        }
        break;
      case ExchangeKind::no_adapter:
      case ExchangeKind::xattn_then_adapter: {
        const bool with_adapter = c.exchange == ExchangeKind::xattn_then_adapter;
        params += k.norm(D);
        if (receives) {
          params += k.attn(D, c.out_proj) + (c.bcast_positional ? positions(w, T, N) * D : 0);
          macs += proj * Mt * D * D + 2 * pairs(w, T, N) * D;
          if (with_adapter) {
            params += k.adapter(D, d);
            macs += 2 * own * D * d;
          }
        }
        break;
      }
      case ExchangeKind::lateral:
        if (receives) {
          params += k.lin(D, D);
          macs += Mt * D * D;
        }
        break;
      case ExchangeKind::identity:
        break;
    }
  }
  row.learnable = params;
  row.flops = k.mac(macs);
  return row;
}

CostRow tower_norm(const Counter& k, bool spatial) {
  CostRow r{spatial ? "spatial.norm" : "temporal.norm"};
  r.learnable = k.norm(k.c.dim);
  return r;
}

CostRow heads(const Counter& k) {
  const CastConfig& c = k.c;
  const I64 D = c.dim, r = c.adapter_dim();
  const bool fused = c.fusion == Fusion::late_add || c.fusion == Fusion::late_concat ||
                     (c.fusion == Fusion::cast && c.head == HeadKind::single);
  CostRow row{"head"};
  I64 params = 0, macs = 0;
  if (fused && c.adapters) {
    params += 2 * k.adapter(D, r);
    macs += 2 * 2 * D * r;
  }
  if (c.fusion == Fusion::late_concat) {
    params += k.lin(2 * D, D);
    macs += 2 * D * D;
  }
  for (const TaskSpec& t : task_specs(c)) {
    const I64 C = t.classes;
    const int members = c.fusion == Fusion::ensemble ? 2 : 1;
    if (c.adapters && (c.fusion == Fusion::ensemble || !fused)) {
      params += members * k.adapter(D, r);
      macs += members * 2 * D * r;
    }
    params += members * k.lin(D, C);
    macs += members * D * C;
  }
  row.learnable = params;
  row.flops = k.mac(macs);
  return row;
}

void finish(CostReport& r) {
  r.learnable = r.frozen = r.flops_per_view = 0;
  for (const auto& row : r.rows) {
    r.learnable += row.learnable;
    r.frozen += row.frozen;
    r.flops_per_view += row.flops;
  }
  r.total_flops = r.flops_per_view * r.views;
}

std::string with_commas(I64 v) {
  std::string s = std::to_string(v < 0 ? -v : v), out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i && (s.size() - i) % 3 == 0) out += ',';
    out += s[i];
  }
  return (v < 0 ? "-" : "") + out;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string cost_row_of(const std::string& name) {
  if (name.rfind("head.", 0) == 0) return "head";
  const auto dot = name.find('.');
  if (dot == std::string::npos) return name;
  const std::string tower = name.substr(0, dot), rest = name.substr(dot + 1);
  if (rest.rfind("patch_embed", 0) == 0 || rest.rfind("pos_embed", 0) == 0 || rest.rfind("cls_token", 0) == 0)
    return tower + ".embed";
  if (rest.rfind("norm.", 0) == 0) return tower + ".norm";
  if (rest.rfind("block", 0) == 0) {
    const auto end = rest.find('.');
    const std::string block = rest.substr(0, end);
    const std::string next = end == std::string::npos ? "" : rest.substr(end + 1, rest.find('.', end + 1) - end - 1);
    if (next == "bcast" || next == "xattn" || next == "lateral") return "exchange." + block;
    return tower + "." + block;
  }
  return tower;
}

CostReport profile(const CastConfig& cfg, int views, const CostAssumptions& a) {
  cfg.validate();
  if (views < 1) throw ConfigError("views must be >= 1");
  if (a.flops_per_mac < 1) throw ConfigError("flops_per_mac must be >= 1");
  CostReport r;
  r.config = cfg;
  r.assumptions = a;
  r.views = views;
  const Counter k{r.config, r.assumptions};
  if (cfg.has_spatial()) r.rows.push_back(tower_embed(k, true));
  if (cfg.has_temporal()) r.rows.push_back(tower_embed(k, false));
  for (int l = 1; l <= cfg.depth; ++l) {
    if (cfg.has_spatial()) r.rows.push_back(tower_block(k, true, l));
    if (cfg.has_temporal()) r.rows.push_back(tower_block(k, false, l));
    if (cfg.exchanges_at(l)) r.rows.push_back(exchange_block(k, l));
  }
  if (cfg.has_spatial()) r.rows.push_back(tower_norm(k, true));
  if (cfg.has_temporal()) r.rows.push_back(tower_norm(k, false));
  r.rows.push_back(heads(k));
  finish(r);
  return r;
}

CostReport count_params(const CastConfig& cfg, const CostAssumptions& a) { return profile(cfg, 1, a); }
CostReport count_flops(const CastConfig& cfg, int views, const CostAssumptions& a) { return profile(cfg, views, a); }

CastConfig tower_config(const CastConfig& cfg, TowerSelect tower) {
  if (tower == TowerSelect::both) return cfg;
  CastConfig c = cfg;
  c.fusion = tower == TowerSelect::spatial ? Fusion::spatial_only : Fusion::temporal_only;
  c.exchange = ExchangeKind::identity;
  c.adapters = false;
  return c;
}

void fit_adapter_ratio(CostReport& report, double target) {
  CastConfig c = report.config;
  c.exchange = ExchangeKind::identity;
  report.fit_target = target;
  double best_err = -1.0;
  for (int r = 1; r <= c.dim; ++r) {
    c.adapter_ratio = double(r) / c.dim;
    const I64 n = profile(c, 1, report.assumptions).learnable;
    const double err = std::abs(double(n) - target);
    if (best_err < 0 || err < best_err) {
      best_err = err;
      report.best_fit_adapter_ratio = double(r) / c.dim;
      report.best_fit_learnable = n;
    }
  }
}

template <class Scalar>
std::vector<CostRow> registry_rows(const ParameterStore<Scalar>& store) {
  std::vector<CostRow> rows;
  std::map<std::string, std::size_t> at;
  for (const auto& p : store) {
    const std::string row = cost_row_of(p->name);
    auto it = at.find(row);
    if (it == at.end()) {
      it = at.emplace(row, rows.size()).first;
      rows.push_back(CostRow{row});
    }
    (p->frozen ? rows[it->second].frozen : rows[it->second].learnable) += p->value.size();
  }
  return rows;
}

template std::vector<CostRow> registry_rows(const ParameterStore<float>&);
template std::vector<CostRow> registry_rows(const ParameterStore<double>&);

std::string assumptions_text(const CostReport& r) {
  const CastConfig& c = r.config;
  std::string s;
  s += "# assumptions\n";
  s += "#   flops_per_mac      = " + std::to_string(r.assumptions.flops_per_mac) +
       " (one multiply-add counted as " + std::to_string(r.assumptions.flops_per_mac) + " FLOP)\n";
  s += "#   excluded           = softmax, layer norm, GELU, residual adds, pooling\n";
  s += "#   include_biases     = " + std::string(r.assumptions.include_biases ? "true" : "false") + "\n";
  s += "#   adapter_ratio      = " + fixed(c.adapter_ratio, 4) + " (width " + std::to_string(c.adapter_dim()) + ")\n";
  s += "#   bcast_ratio        = " + fixed(c.bcast_ratio, 4) + " (width " + std::to_string(c.bottleneck_dim()) + ")\n";
  s += "#   mhca_out_proj      = " + std::string(c.out_proj ? "true" : "false") + "\n";
  s += "#   bcast_positional   = " + std::string(c.bcast_positional ? "true" : "false") + "\n";
  s += "#   exchange           = " + to_string(c.exchange) + ", directions " + to_string(c.directions) + "\n";
  if (r.fit_target > 0)
    s += "#   best_fit_adapter_ratio = " + fixed(r.best_fit_adapter_ratio, 4) + " (identity variant learnable " +
         with_commas(r.best_fit_learnable) + " vs target " + with_commas(static_cast<I64>(r.fit_target)) +
         "; fitted, not stated)\n";
  return s;
}

std::string report_text(const CostReport& r) {
  std::string s = assumptions_text(r);
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %16s %16s %14s\n", "layer", "learnable", "frozen", "GFLOPs/view");
  s += line;
  auto add = [&](const std::string& name, I64 l, I64 f, I64 fl) {
    std::snprintf(line, sizeof line, "%-20s %16s %16s %14s\n", name.c_str(), with_commas(l).c_str(),
                  with_commas(f).c_str(), fixed(double(fl) / 1e9, 3).c_str());
    s += line;
  };
  for (const auto& row : r.rows) add(row.name, row.learnable, row.frozen, row.flops);
  add("total", r.learnable, r.frozen, r.flops_per_view);
  s += "views " + std::to_string(r.views) + ", total GFLOPs " + fixed(double(r.total_flops) / 1e9, 3) + "\n";
  return s;
}

std::string report_json(const CostReport& r) {
  nlohmann::ordered_json j;
  const CastConfig& c = r.config;
  j["assumptions"] = {{"flops_per_mac", r.assumptions.flops_per_mac},
                      {"include_biases", r.assumptions.include_biases},
                      {"adapter_ratio", c.adapter_ratio},
                      {"bcast_ratio", c.bcast_ratio},
                      {"mhca_out_proj", c.out_proj},
                      {"bcast_positional", c.bcast_positional}};
  if (r.fit_target > 0)
    j["assumptions"]["best_fit_adapter_ratio"] = {
        {"ratio", r.best_fit_adapter_ratio}, {"learnable", r.best_fit_learnable}, {"target", r.fit_target}};
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : r.rows)
    j["rows"].push_back({{"name", row.name}, {"learnable", row.learnable}, {"frozen", row.frozen}, {"flops", row.flops}});
  j["learnable"] = r.learnable;
  j["frozen"] = r.frozen;
  j["flops_per_view"] = r.flops_per_view;
  j["views"] = r.views;
  j["total_flops"] = r.total_flops;
  j["config_hash"] = hex64(c.hash());
  return j.dump(2) + "\n";
}

}  // namespace cast
