#pragma once

#include "cast/core.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace cast {

/// Key support of an attention window, relative to the query token.
enum class Window { space, time, space_time };

/// How the two towers exchange information after each block's MHSA.
enum class ExchangeKind { identity, bcast, no_adapter, xattn_then_adapter, lateral };

enum class Directions { both, s2t_only, t2s_only };

/// How tower outputs reach the classification heads.
enum class Fusion { cast, ensemble, late_add, late_concat, spatial_only, temporal_only };

enum class HeadKind { single, dual };

/// Tower self-attention flavour: image-style (per-frame) or video-style (joint space-time).
enum class Arch { clip, videomae };

enum class TemporalAttention { joint, divided };

std::string to_string(Window w);
std::string to_string(ExchangeKind k);
std::string to_string(Directions d);
std::string to_string(Fusion f);
std::string to_string(HeadKind h);
std::string to_string(Arch a);
std::string to_string(TemporalAttention a);

Window parse_window(const std::string& s);
ExchangeKind parse_exchange(const std::string& s);
Directions parse_directions(const std::string& s);
Fusion parse_fusion(const std::string& s);
HeadKind parse_head(const std::string& s);
Arch parse_arch(const std::string& s);
TemporalAttention parse_temporal_attention(const std::string& s);

/// Complete architecture description shared by the model, profiler and CLI.
struct CastConfig {
  int depth = 4;
  int dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int patch = 8;
  int frames = 16;  ///< raw frame count 2T
  int height = 32;
  int width = 32;
  int channels = 3;

  double adapter_ratio = 0.25;
  double bcast_ratio = 0.5;
  Window t2s_window = Window::time;
  Window s2t_window = Window::space;
  ExchangeKind exchange = ExchangeKind::bcast;
  Directions directions = Directions::both;
  int exchange_first = 1;  ///< 1-indexed, inclusive
  int exchange_last = 0;   ///< 0 means the last block
  Fusion fusion = Fusion::cast;
  bool adapters = true;
  bool full_finetune = false;
  bool bcast_positional = true;
  bool out_proj = true;

  HeadKind head = HeadKind::dual;
  int appearance_classes = 4;
  int motion_classes = 4;
  int num_classes = 16;  ///< single-head class count

  Arch spatial_arch = Arch::clip;
  Arch temporal_arch = Arch::videomae;
  TemporalAttention temporal_attention = TemporalAttention::joint;
  bool random_cls = false;
  /// Std of frozen tower weights; 0 selects 1/sqrt(fan_in).
  double frozen_init_std = 0.0;

  std::uint64_t seed = 0;
  std::string variant = "cast";

  int time_steps() const { return frames / 2; }
  int patches() const { return (height / patch) * (width / patch); }
  int adapter_dim() const { return static_cast<int>(std::lround(adapter_ratio * dim)); }
  int bottleneck_dim() const { return static_cast<int>(std::lround(bcast_ratio * dim)); }
  int head_dim() const { return dim / heads; }
  int last_exchange_layer() const { return exchange_last == 0 ? depth : exchange_last; }
  bool exchanges_at(int layer) const;  ///< 1-indexed block
  bool has_spatial() const { return fusion != Fusion::temporal_only; }
  bool has_temporal() const { return fusion != Fusion::spatial_only; }
  bool t2s_enabled() const { return directions != Directions::s2t_only; }
  bool s2t_enabled() const { return directions != Directions::t2s_only; }
  Window spatial_self_window() const;
  Window temporal_self_window() const;

  /// Throws ConfigError describing the first inconsistency.
  void validate() const;

  /// Canonical `key=value` pairs (without the `model.` prefix), sorted by key.
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  /// Sets one field from text; unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  /// FNV-1a over the canonical text; stable under key reordering of the source file.
  std::uint64_t hash() const;

  /// ViT-B/16, 12 blocks, 16 frames at 224x224, dual head with 300/97 classes.
  static CastConfig paper_scale();
};

/// Tags accepted by apply_variant.
const std::vector<std::string>& variant_tags();

/// Rewrites the fields that define an ablation variant; other fields are kept.
/// Unknown tags throw ConfigError listing the valid ones.
CastConfig apply_variant(CastConfig cfg, const std::string& tag);

}  // namespace cast
