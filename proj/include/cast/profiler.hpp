#pragma once

#include "cast/config.hpp"
#include "cast/parameter.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cast {

/// Counting conventions applied by the profiler.
struct CostAssumptions {
  /// FLOPs charged per multiply-accumulate. 1 follows the convention behind
  /// published per-view ViT figures (e.g. 17.6 G for ViT-B/16 at 224²).
  int flops_per_mac = 1;
  /// Count bias vectors (the model always has them; off only for comparisons).
  bool include_biases = true;
};

struct CostRow {
  std::string name;
  std::int64_t learnable = 0;
  std::int64_t frozen = 0;
  std::int64_t flops = 0;  ///< per view
};

struct CostReport {
  std::vector<CostRow> rows;
  std::int64_t learnable = 0, frozen = 0, flops_per_view = 0;
  int views = 1;
  std::int64_t total_flops = 0;  ///< flops_per_view * views
  CostAssumptions assumptions;
  CastConfig config;
  /// Adapter ratio whose identity-variant learnable count is closest to
  /// `fit_target` (0 when no target was given).
  double fit_target = 0.0;
  double best_fit_adapter_ratio = 0.0;
  std::int64_t best_fit_learnable = 0;
};

/// Row that owns a parameter: "<tower>.embed", "<tower>.block<l>",
/// "exchange.block<l>", "<tower>.norm" or "head".
std::string cost_row_of(const std::string& param_name);

/// Analytic parameter and per-view FLOP counts, one row per layer, in
/// execution order. Totals are exact sums of the rows.
CostReport profile(const CastConfig& cfg, int views = 1, const CostAssumptions& a = {});
CostReport count_params(const CastConfig& cfg, const CostAssumptions& a = {});
CostReport count_flops(const CastConfig& cfg, int views, const CostAssumptions& a = {});

/// The expert alone: one tower, no adapters, no exchange.
enum class TowerSelect { both, spatial, temporal };
CastConfig tower_config(const CastConfig& cfg, TowerSelect tower);

/// Sets report.best_fit_* by scanning integer adapter widths 1..D of the
/// identity variant of `cfg`.
void fit_adapter_ratio(CostReport& report, double target_learnable);

/// Learnable/frozen counts of an instantiated store, grouped with cost_row_of.
template <class Scalar>
std::vector<CostRow> registry_rows(const ParameterStore<Scalar>& store);

std::string report_text(const CostReport& r);
std::string report_json(const CostReport& r);
std::string assumptions_text(const CostReport& r);

}  // namespace cast
