#pragma once

#include "cast/config.hpp"
#include "cast/synthdata.hpp"
#include "cast/train.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace cast {

/// Everything one CLI run needs, read from flat "section.key = value" text
/// (sections model, train, data, run; '#' starts a comment).
struct RunConfig {
  CastConfig model;
  TrainConfig train;
  SyntheticSpec data;
  std::string data_path;        ///< run.data
  std::string checkpoint_path;  ///< run.checkpoint
  std::string out;              ///< run.out
  ViewSpec views;               ///< run.views (TxS)
  std::vector<std::string> variants;    ///< run.variants (comma list, ablate)
  std::vector<std::uint64_t> seeds{0};  ///< run.seeds (comma list, ablate)

  /// Applies one key. "model.variant" rewrites the variant fields, so
  /// parse_run_config applies it before every other model key.
  void set(const std::string& key, const std::string& value);

  /// Copies clip geometry and class counts from the data section into the
  /// model section, except for model keys that were set explicitly.
  void sync_model_from_data();

  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  /// Hash of the canonical key=value listing; independent of input key order.
  std::uint64_t hash() const;
  std::string to_text() const;

  std::set<std::string> explicit_model_keys;
};

/// Parses config text. Unknown or repeated keys raise ConfigError with the line number.
RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});

}  // namespace cast
