#pragma once

#include "cast/bcast.hpp"
#include "cast/config.hpp"

#include <atomic>
#include <string>
#include <vector>

namespace cast {

/// Logits of one classification task. Ensembles have one member per expert;
/// every other fusion has exactly one member.
template <class Scalar>
struct TaskOutput {
  std::string name;
  std::vector<Var<Scalar>> members;
};

template <class Scalar>
struct ModelOutput {
  std::vector<TaskOutput<Scalar>> tasks;
};

struct TaskSpec {
  std::string name;
  int classes;
};

/// Task list implied by the head kind: dual -> appearance, motion;
/// single -> action (label = appearance * motion_classes + motion).
std::vector<TaskSpec> task_specs(const CastConfig& cfg);

/// Frozen spatial and temporal towers with adapters, per-block exchange
/// modules and classification heads, built deterministically from a config.
template <class Scalar>
class CastModel {
 public:
  using P = Parameter<Scalar>;

  struct AttnRefs {
    P *q_w = nullptr, *q_b = nullptr, *k_w = nullptr, *k_b = nullptr;
    P *v_w = nullptr, *v_b = nullptr, *o_w = nullptr, *o_b = nullptr;
  };
  struct AdapterRefs {
    P *down_w = nullptr, *down_b = nullptr, *up_w = nullptr, *up_b = nullptr;
  };
  struct TowerBlock {
    P *norm1_w = nullptr, *norm1_b = nullptr, *norm2_w = nullptr, *norm2_b = nullptr;
    AttnRefs attn;
    AttnRefs attn_time;  ///< divided attention only
    P *fc1_w = nullptr, *fc1_b = nullptr, *fc2_w = nullptr, *fc2_b = nullptr;
    AdapterRefs adapter_attn, adapter_mlp;
    Window window = Window::space;
    bool divided = false;
  };
  struct SideRefs {
    P *down_w = nullptr, *down_b = nullptr, *norm_g = nullptr, *norm_b = nullptr, *up_w = nullptr, *up_b = nullptr;
    AdapterRefs adapter;
    P *lateral_w = nullptr, *lateral_b = nullptr;
    AttnRefs attn;
    P* pos = nullptr;
  };
  struct ExchangeRefs {
    bool present = false;
    SideRefs spatial, temporal;  ///< spatial side owns T2S, temporal side owns S2T
  };
  struct Tower {
    P *patch_w = nullptr, *patch_b = nullptr, *pos = nullptr, *cls = nullptr;
    std::vector<TowerBlock> blocks;
    P *norm_w = nullptr, *norm_b = nullptr;
  };
  struct HeadRefs {
    AdapterRefs spatial_adapter, temporal_adapter;
    P *fuse_w = nullptr, *fuse_b = nullptr;
    /// Per task: classifier, plus per-task adapters for single-path heads.
    struct Task {
      P *fc_w = nullptr, *fc_b = nullptr;
      AdapterRefs adapter;
      P *t_fc_w = nullptr, *t_fc_b = nullptr;  ///< ensemble temporal member
      AdapterRefs t_adapter;
    };
    std::vector<Task> tasks;
  };

  explicit CastModel(const CastConfig& cfg);

  const CastConfig& config() const { return cfg_; }
  ParameterStore<Scalar>& params() { return store_; }
  const ParameterStore<Scalar>& params() const { return store_; }
  const std::vector<TaskSpec>& tasks() const { return tasks_; }

  /// Forward pass on a clip [B, 2T, H, W, C]. With `trace`, the exchange of
  /// block `trace_block` (1-indexed) records its stages.
  ModelOutput<Scalar> forward(Tape<Scalar>& tape, const Tensor<Scalar>& clip, StageTrace* trace = nullptr,
                              int trace_block = 1) const;

  TokenGrid<Scalar> tokenize_spatial(Tape<Scalar>& tape, const Tensor<Scalar>& clip) const;
  TokenGrid<Scalar> tokenize_temporal(Tape<Scalar>& tape, const Tensor<Scalar>& clip) const;

  /// Attention half of a tower block: X + ADAP(MHSA(LN X)) + MHSA(LN X).
  TokenGrid<Scalar> attention_stage(Tape<Scalar>& tape, const TokenGrid<Scalar>& x, bool spatial, int layer) const;
  /// MLP half: B + FFN(LN B) + ADAP(LN B).
  TokenGrid<Scalar> mlp_stage(Tape<Scalar>& tape, const TokenGrid<Scalar>& b, bool spatial, int layer) const;
  /// Full block for both towers (either may be absent for single-tower fusions).
  std::pair<TokenGrid<Scalar>, TokenGrid<Scalar>> block_forward(Tape<Scalar>& tape, const TokenGrid<Scalar>& x_s,
                                                                const TokenGrid<Scalar>& x_t, int layer,
                                                                StageTrace* trace = nullptr) const;
  ExchangeParams<Scalar> exchange_params(Tape<Scalar>& tape, int layer) const;

  /// Frame-averaged normalised CLS token [B, D] and normalised GAP token [B, D].
  Var<Scalar> spatial_feature(Tape<Scalar>& tape, const TokenGrid<Scalar>& x_s) const;
  Var<Scalar> temporal_feature(Tape<Scalar>& tape, const TokenGrid<Scalar>& x_t) const;
  ModelOutput<Scalar> classify(Tape<Scalar>& tape, Var<Scalar> f_s, Var<Scalar> f_t) const;

  Window spatial_window() const { return spatial_.blocks.empty() ? Window::space : spatial_.blocks[0].window; }
  Window temporal_window() const { return temporal_.blocks.empty() ? Window::space_time : temporal_.blocks[0].window; }
  const ExchangeRefs& exchange_refs(int layer) const { return exchanges_.at(static_cast<std::size_t>(layer - 1)); }

  /// Number of clips pushed through forward() so far.
  std::uint64_t forward_count() const { return forwards_.load(); }

 private:
  P* add_param(const std::string& name, Shape shape, bool frozen, int layer_id, bool decay, int init, double std = 0.0);
  AttnRefs add_attention(const std::string& prefix, Index in, Index width, bool frozen, int layer_id, bool out_proj,
                         bool zero_out);
  AdapterRefs add_adapter(const std::string& prefix, Index in, Index hidden, int layer_id, bool zero_up);
  void build_tower(Tower& tower, const std::string& name, bool spatial);
  void build_exchange(int layer);
  void build_heads();

  CastConfig cfg_;
  ParameterStore<Scalar> store_;
  std::vector<TaskSpec> tasks_;
  Tower spatial_, temporal_;
  std::vector<ExchangeRefs> exchanges_;
  HeadRefs heads_;
  mutable std::atomic<std::uint64_t> forwards_{0};
};

}  // namespace cast
