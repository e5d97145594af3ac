#include "cast/config.hpp"

#include "cast/kv.hpp"
#include "cast/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>

namespace cast {

namespace {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<Window> kWindows[] = {{Window::space, "space"}, {Window::time, "time"}, {Window::space_time, "space_time"}};
constexpr EnumName<ExchangeKind> kExchanges[] = {{ExchangeKind::identity, "identity"},
                                                 {ExchangeKind::bcast, "bcast"},
                                                 {ExchangeKind::no_adapter, "no_adapter"},
                                                 {ExchangeKind::xattn_then_adapter, "xattn_then_adapter"},
                                                 {ExchangeKind::lateral, "lateral"}};
constexpr EnumName<Directions> kDirections[] = {
    {Directions::both, "both"}, {Directions::s2t_only, "s2t_only"}, {Directions::t2s_only, "t2s_only"}};
constexpr EnumName<Fusion> kFusions[] = {{Fusion::cast, "cast"},
                                         {Fusion::ensemble, "ensemble"},
                                         {Fusion::late_add, "late_add"},
                                         {Fusion::late_concat, "late_concat"},
                                         {Fusion::spatial_only, "spatial_only"},
                                         {Fusion::temporal_only, "temporal_only"}};
constexpr EnumName<HeadKind> kHeads[] = {{HeadKind::single, "single"}, {HeadKind::dual, "dual"}};
constexpr EnumName<Arch> kArchs[] = {{Arch::clip, "clip"}, {Arch::videomae, "videomae"}};
constexpr EnumName<TemporalAttention> kTemporal[] = {{TemporalAttention::joint, "joint"},
                                                     {TemporalAttention::divided, "divided"}};

template <class E, std::size_t N>
std::string name_of(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <class E, std::size_t N>
E parse_enum(const EnumName<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  std::string valid;
  for (const auto& e : table) valid += std::string(valid.empty() ? "" : ", ") + e.name;
  throw ConfigError("invalid " + std::string(what) + " '" + s + "' (valid: " + valid + ")");
}

}  // namespace

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt_double(double d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

std::string to_string(Window w) { return name_of(kWindows, w); }
std::string to_string(ExchangeKind k) { return name_of(kExchanges, k); }
std::string to_string(Directions d) { return name_of(kDirections, d); }
std::string to_string(Fusion f) { return name_of(kFusions, f); }
std::string to_string(HeadKind h) { return name_of(kHeads, h); }
std::string to_string(Arch a) { return name_of(kArchs, a); }
std::string to_string(TemporalAttention a) { return name_of(kTemporal, a); }

Window parse_window(const std::string& s) { return parse_enum(kWindows, s, "window"); }
ExchangeKind parse_exchange(const std::string& s) { return parse_enum(kExchanges, s, "exchange kind"); }
Directions parse_directions(const std::string& s) { return parse_enum(kDirections, s, "directions"); }
Fusion parse_fusion(const std::string& s) { return parse_enum(kFusions, s, "fusion"); }
HeadKind parse_head(const std::string& s) { return parse_enum(kHeads, s, "head kind"); }
Arch parse_arch(const std::string& s) { return parse_enum(kArchs, s, "architecture"); }
TemporalAttention parse_temporal_attention(const std::string& s) {
  return parse_enum(kTemporal, s, "temporal attention");
}

bool CastConfig::exchanges_at(int layer) const {
  return exchange != ExchangeKind::identity && layer >= exchange_first && layer <= last_exchange_layer();
}

Window CastConfig::spatial_self_window() const {
  return spatial_arch == Arch::clip ? Window::space : Window::space_time;
}

Window CastConfig::temporal_self_window() const {
  return temporal_arch == Arch::clip ? Window::space : Window::space_time;
}

void CastConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (depth < 1) fail("model.depth must be >= 1");
  if (dim < 1 || heads < 1) fail("model.dim and model.heads must be positive");
  if (dim % heads != 0) fail("model.dim " + std::to_string(dim) + " is not divisible by model.heads " + std::to_string(heads));
  if (mlp_ratio < 1) fail("model.mlp_ratio must be >= 1");
  if (patch < 1 || height < 1 || width < 1 || channels < 1) fail("patch, resolution and channels must be positive");
  if (height % patch != 0 || width % patch != 0)
    fail("resolution " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by patch size " +
         std::to_string(patch));
  if (frames < 2 || frames % 2 != 0) fail("model.frames must be even and >= 2, got " + std::to_string(frames));
  if (!(adapter_ratio > 0 && adapter_ratio <= 1)) fail("model.adapter_ratio must lie in (0, 1]");
  if (!(bcast_ratio > 0 && bcast_ratio <= 1)) fail("model.bcast_ratio must lie in (0, 1]");
  if (adapters && adapter_dim() < 1) fail("adapter bottleneck is empty: ratio * dim < 1");
  if (exchange == ExchangeKind::bcast || exchange == ExchangeKind::xattn_then_adapter) {
    if (bottleneck_dim() < 1) fail("exchange bottleneck is empty: bcast_ratio * dim < 1");
  }
  if (exchange == ExchangeKind::bcast && bottleneck_dim() % heads != 0)
    fail("exchange bottleneck " + std::to_string(bottleneck_dim()) + " is not divisible by " + std::to_string(heads) + " heads");
  if (exchange_first < 1 || last_exchange_layer() > depth || exchange_first > last_exchange_layer())
    fail("exchange layer range " + std::to_string(exchange_first) + "-" + std::to_string(last_exchange_layer()) +
         " is outside 1-" + std::to_string(depth));
  if (head == HeadKind::dual && (appearance_classes < 1 || motion_classes < 1)) fail("dual head needs positive class counts");
  if (head == HeadKind::single && num_classes < 1) fail("single head needs model.num_classes >= 1");
  const bool two_towers = fusion == Fusion::cast;
  if (!two_towers && exchange != ExchangeKind::identity)
    fail("inconsistent variant: fusion '" + to_string(fusion) + "' requires exchange 'identity', got '" +
         to_string(exchange) + "'");
  if (frozen_init_std < 0) fail("model.frozen_init_std must be >= 0");
  if (temporal_attention == TemporalAttention::divided && spatial_arch == Arch::videomae)
    fail("divided temporal attention is only supported on the tube tower; the frame tower carries CLS tokens");
}

std::vector<std::pair<std::string, std::string>> CastConfig::to_kv() const {
  std::vector<std::pair<std::string, std::string>> kv = {
      {"adapter_ratio", fmt_double(adapter_ratio)},
      {"adapters", fmt_bool(adapters)},
      {"appearance_classes", std::to_string(appearance_classes)},
      {"bcast_positional", fmt_bool(bcast_positional)},
      {"bcast_ratio", fmt_double(bcast_ratio)},
      {"channels", std::to_string(channels)},
      {"depth", std::to_string(depth)},
      {"dim", std::to_string(dim)},
      {"directions", to_string(directions)},
      {"exchange", to_string(exchange)},
      {"exchange_first", std::to_string(exchange_first)},
      {"exchange_last", std::to_string(exchange_last)},
      {"frames", std::to_string(frames)},
      {"frozen_init_std", fmt_double(frozen_init_std)},
      {"full_finetune", fmt_bool(full_finetune)},
      {"fusion", to_string(fusion)},
      {"head", to_string(head)},
      {"heads", std::to_string(heads)},
      {"height", std::to_string(height)},
      {"mlp_ratio", std::to_string(mlp_ratio)},
      {"motion_classes", std::to_string(motion_classes)},
      {"num_classes", std::to_string(num_classes)},
      {"out_proj", fmt_bool(out_proj)},
      {"patch", std::to_string(patch)},
      {"random_cls", fmt_bool(random_cls)},
      {"s2t_window", to_string(s2t_window)},
      {"seed", std::to_string(seed)},
      {"spatial_arch", to_string(spatial_arch)},
      {"t2s_window", to_string(t2s_window)},
      {"temporal_arch", to_string(temporal_arch)},
      {"temporal_attention", to_string(temporal_attention)},
      {"variant", variant},
      {"width", std::to_string(width)},
  };
  std::sort(kv.begin(), kv.end());
  return kv;
}

void CastConfig::set(const std::string& key, const std::string& v) {
  if (key == "depth") depth = parse_int(key, v);
  else if (key == "dim") dim = parse_int(key, v);
  else if (key == "heads") heads = parse_int(key, v);
  else if (key == "mlp_ratio") mlp_ratio = parse_int(key, v);
  else if (key == "patch") patch = parse_int(key, v);
  else if (key == "frames") frames = parse_int(key, v);
  else if (key == "height") height = parse_int(key, v);
  else if (key == "width") width = parse_int(key, v);
  else if (key == "channels") channels = parse_int(key, v);
  else if (key == "adapter_ratio") adapter_ratio = parse_double(key, v);
  else if (key == "bcast_ratio") bcast_ratio = parse_double(key, v);
  else if (key == "t2s_window") t2s_window = parse_window(v);
  else if (key == "s2t_window") s2t_window = parse_window(v);
  else if (key == "exchange") exchange = parse_exchange(v);
  else if (key == "directions") directions = parse_directions(v);
  else if (key == "exchange_first") exchange_first = parse_int(key, v);
  else if (key == "exchange_last") exchange_last = parse_int(key, v);
  else if (key == "fusion") fusion = parse_fusion(v);
  else if (key == "adapters") adapters = parse_bool(key, v);
  else if (key == "full_finetune") full_finetune = parse_bool(key, v);
  else if (key == "bcast_positional") bcast_positional = parse_bool(key, v);
  else if (key == "out_proj") out_proj = parse_bool(key, v);
  else if (key == "head") head = parse_head(v);
  else if (key == "appearance_classes") appearance_classes = parse_int(key, v);
  else if (key == "motion_classes") motion_classes = parse_int(key, v);
  else if (key == "num_classes") num_classes = parse_int(key, v);
  else if (key == "spatial_arch") spatial_arch = parse_arch(v);
  else if (key == "temporal_arch") temporal_arch = parse_arch(v);
  else if (key == "temporal_attention") temporal_attention = parse_temporal_attention(v);
  else if (key == "random_cls") random_cls = parse_bool(key, v);
  else if (key == "frozen_init_std") frozen_init_std = parse_double(key, v);
  else if (key == "seed") seed = parse_u64(key, v);
  else if (key == "variant") *this = apply_variant(*this, v);
  else throw ConfigError("unknown key 'model." + key + "'");
}

std::uint64_t CastConfig::hash() const {
  std::string text;
  for (const auto& [k, v] : to_kv()) text += "model." + k + "=" + v + "\n";
  return fnv1a(text);
}

CastConfig CastConfig::paper_scale() {
  CastConfig c;
  c.depth = 12;
  c.dim = 768;
  c.heads = 12;
  c.mlp_ratio = 4;
  c.patch = 16;
  c.frames = 16;
  c.height = 224;
  c.width = 224;
  c.channels = 3;
  c.head = HeadKind::dual;
  c.appearance_classes = 300;
  c.motion_classes = 97;
  return c;
}

const std::vector<std::string>& variant_tags() {
  static const std::vector<std::string> tags = {
      "cast",          "identity",   "independent_no_adapter", "independent_full_ft", "ensemble",
      "late_add",      "late_concat", "lateral",               "no_adapter",          "xattn_then_adapter",
      "s2t_only",      "t2s_only",    "spatial_only",          "temporal_only",       "role_swap"};
  return tags;
}

CastConfig apply_variant(CastConfig c, const std::string& tag) {
  const auto& tags = variant_tags();
  if (std::find(tags.begin(), tags.end(), tag) == tags.end()) {
    std::string valid;
    for (const auto& t : tags) valid += (valid.empty() ? "" : ", ") + t;
    throw ConfigError("unknown variant '" + tag + "' (valid: " + valid + ")");
  }
  c.exchange = ExchangeKind::bcast;
  c.directions = Directions::both;
  c.fusion = Fusion::cast;
  c.adapters = true;
  c.full_finetune = false;
  c.spatial_arch = Arch::clip;
  c.temporal_arch = Arch::videomae;
  c.variant = tag;

  if (tag == "identity") {
    c.exchange = ExchangeKind::identity;
  } else if (tag == "independent_no_adapter") {
    c.exchange = ExchangeKind::identity;
    c.adapters = false;
  } else if (tag == "independent_full_ft") {
    c.exchange = ExchangeKind::identity;
    c.adapters = false;
    c.full_finetune = true;
  } else if (tag == "ensemble") {
    c.exchange = ExchangeKind::identity;
    c.fusion = Fusion::ensemble;
  } else if (tag == "late_add") {
    c.exchange = ExchangeKind::identity;
    c.fusion = Fusion::late_add;
  } else if (tag == "late_concat") {
    c.exchange = ExchangeKind::identity;
    c.fusion = Fusion::late_concat;
  } else if (tag == "lateral") {
    c.exchange = ExchangeKind::lateral;
  } else if (tag == "no_adapter") {
    c.exchange = ExchangeKind::no_adapter;
  } else if (tag == "xattn_then_adapter") {
    c.exchange = ExchangeKind::xattn_then_adapter;
  } else if (tag == "s2t_only") {
    c.directions = Directions::s2t_only;
  } else if (tag == "t2s_only") {
    c.directions = Directions::t2s_only;
  } else if (tag == "spatial_only") {
    c.exchange = ExchangeKind::identity;
    c.fusion = Fusion::spatial_only;
  } else if (tag == "temporal_only") {
    c.exchange = ExchangeKind::identity;
    c.fusion = Fusion::temporal_only;
  } else if (tag == "role_swap") {
    c.spatial_arch = Arch::videomae;
    c.temporal_arch = Arch::clip;
  }
  return c;
}

}  // namespace cast
