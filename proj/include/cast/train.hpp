#pragma once

#include "cast/metrics.hpp"
#include "cast/model.hpp"
#include "cast/synthdata.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace cast {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_epochs = 1;
  int epochs = 10;
  double layer_decay = 0.75;
  int batch_size = 16;
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;
  /// Stop after this many optimizer steps (0 = run every epoch). The schedule
  /// still spans `epochs`.
  long max_steps = 0;
  /// Evaluate on the validation split every this many epochs (0 = final epoch only).
  int val_every = 1;

  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  void set(const std::string& key, const std::string& value);
};

/// Linear warmup from 0 to `base` over `warmup_steps`, then half-cosine to 0
/// at `total_steps`.
double lr_at(long step, long total_steps, long warmup_steps, double base);
double lr_at(long step, const TrainConfig& cfg, long steps_per_epoch);

/// decay^(total_layers - layer_id); layer ids follow Parameter::layer_id and
/// total_layers is depth + 1.
double layer_lr_scale(int layer_id, int total_layers, double decay);

/// Decoupled-weight-decay Adam over the learnable parameters of a store.
template <class Scalar>
class AdamW {
 public:
  AdamW(ParameterStore<Scalar>& store, const TrainConfig& cfg, int total_layers);
  /// One update with base rate `lr`; parameters without a gradient are skipped.
  void step(double lr);
  long steps() const { return t_; }

 private:
  struct Slot {
    Parameter<Scalar>* p;
    Vector<Scalar> m, v;
    double scale;
  };
  std::vector<Slot> slots_;
  TrainConfig cfg_;
  long t_ = 0;
};

struct ViewSpec {
  int temporal = 1;
  int spatial = 1;
  int count() const { return temporal * spatial; }
};
/// Parses "TxS", e.g. "2x3".
ViewSpec parse_views(const std::string& text);

/// Mean softmax over temporal_views x spatial_crops views of `video`
/// [B, F, H', W', C]; one [B, classes] matrix per task. Temporal views start at
/// evenly spaced frame offsets, crops at evenly spaced offsets along the axis
/// with more slack (centred on the other axis).
template <class Scalar>
std::vector<RowMatrix<double>> infer_multiview(const CastModel<Scalar>& model, const Tensor<Scalar>& video,
                                               ViewSpec views);

/// Class labels of `sample` for a task: appearance, motion, or
/// action = appearance * motion_classes + motion.
int task_label(const std::string& task, const Sample& sample, int motion_classes);

/// Scores per-task probabilities against the labels of data.samples[indices].
MetricsReport score(const std::vector<TaskSpec>& tasks, const std::vector<RowMatrix<double>>& probs,
                    const Dataset& data, const std::vector<std::size_t>& indices);

/// Batched multi-view inference fanned across worker threads; row i of each
/// result belongs to indices[i].
template <class Scalar>
std::vector<RowMatrix<double>> predict(const CastModel<Scalar>& model, const Dataset& data,
                                       const std::vector<std::size_t>& indices, int batch_size, ViewSpec views = {},
                                       int threads = 0);

template <class Scalar>
MetricsReport evaluate(const CastModel<Scalar>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                       int batch_size, ViewSpec views = {}, int threads = 0);

struct Split {
  std::vector<std::size_t> train, val;
};
/// The first `train_count` samples train, the rest validate.
Split split_dataset(const Dataset& data, int train_count);

/// Throws ConfigError unless the model's class counts match the dataset.
void check_compatible(const CastConfig& cfg, const Dataset& data);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;  ///< rate at the last step of the epoch
  double train_loss = 0.0;
  bool evaluated = false;
  MetricsReport val;
};

struct TrainResult {
  std::vector<EpochLog> curve;
  long steps = 0;
  MetricsReport final_val;
};

/// Fine-tunes the learnable parameters with summed per-task cross-entropy.
/// Throws ContractError when the model has nothing to train.
template <class Scalar>
TrainResult train(CastModel<Scalar>& model, const Dataset& data, const Split& split, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Summed cross-entropy of every task member for one batch.
template <class Scalar>
Var<Scalar> batch_loss(Tape<Scalar>& tape, const CastModel<Scalar>& model, const Dataset& data,
                       const std::vector<std::size_t>& indices, Scalar smoothing);

std::string metrics_json(const MetricsReport& report, std::uint64_t config_hash, std::uint64_t seed);
std::string loss_curve_csv(const std::vector<EpochLog>& curve);

}  // namespace cast
