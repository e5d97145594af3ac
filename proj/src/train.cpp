#include "cast/train.hpp"

#include "cast/hashing.hpp"
#include "cast/kv.hpp"
#include "cast/parallel.hpp"
#include "cast/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace cast {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.beta1/beta2 must be in (0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (epochs < 1) throw ConfigError("train.epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("train.warmup_epochs must be in [0, epochs]");
  if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw ConfigError("train.layer_decay must be in (0, 1]");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("train.label_smoothing must be in [0, 1)");
  if (max_steps < 0) throw ConfigError("train.max_steps must be non-negative");
  if (val_every < 0) throw ConfigError("train.val_every must be non-negative");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_kv() const {
  return {{"adam_eps", fmt_double(adam_eps)},
          {"batch_size", std::to_string(batch_size)},
          {"beta1", fmt_double(beta1)},
          {"beta2", fmt_double(beta2)},
          {"epochs", std::to_string(epochs)},
          {"label_smoothing", fmt_double(label_smoothing)},
          {"layer_decay", fmt_double(layer_decay)},
          {"lr", fmt_double(lr)},
          {"max_steps", std::to_string(max_steps)},
          {"seed", std::to_string(seed)},
          {"val_every", std::to_string(val_every)},
          {"warmup_epochs", std::to_string(warmup_epochs)},
          {"weight_decay", fmt_double(weight_decay)}};
}

void TrainConfig::set(const std::string& key, const std::string& v) {
  if (key == "lr") lr = parse_double(key, v);
  else if (key == "weight_decay") weight_decay = parse_double(key, v);
  else if (key == "beta1") beta1 = parse_double(key, v);
  else if (key == "beta2") beta2 = parse_double(key, v);
  else if (key == "adam_eps") adam_eps = parse_double(key, v);
  else if (key == "warmup_epochs") warmup_epochs = parse_int(key, v);
  else if (key == "epochs") epochs = parse_int(key, v);
  else if (key == "layer_decay") layer_decay = parse_double(key, v);
  else if (key == "batch_size") batch_size = parse_int(key, v);
  else if (key == "label_smoothing") label_smoothing = parse_double(key, v);
  else if (key == "seed") seed = parse_u64(key, v);
  else if (key == "max_steps") max_steps = static_cast<long>(parse_u64(key, v));
  else if (key == "val_every") val_every = parse_int(key, v);
  else throw ConfigError("unknown key 'train." + key + "'");
}

double lr_at(long step, long total_steps, long warmup_steps, double base) {
  if (step < warmup_steps) return base * double(step) / double(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_at(long step, const TrainConfig& cfg, long steps_per_epoch) {
  return lr_at(step, cfg.epochs * steps_per_epoch, cfg.warmup_epochs * steps_per_epoch, cfg.lr);
}

double layer_lr_scale(int layer_id, int total_layers, double decay) {
  return std::pow(decay, total_layers - std::min(layer_id, total_layers));
}

template <class Scalar>
AdamW<Scalar>::AdamW(ParameterStore<Scalar>& store, const TrainConfig& cfg, int total_layers) : cfg_(cfg) {
  for (auto& p : store) {
    if (p->frozen) continue;
    const Index n = p->value.size();
    slots_.push_back({p.get(), Vector<Scalar>::Zero(n), Vector<Scalar>::Zero(n),
                      layer_lr_scale(p->layer_id, total_layers, cfg.layer_decay)});
  }
}

template <class Scalar>
void AdamW<Scalar>::step(double lr) {
  ++t_;
  const Scalar b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
  const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta1, double(t_)));
  const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta2, double(t_)));
  const Scalar eps = static_cast<Scalar>(cfg_.adam_eps);
  for (auto& s : slots_) {
    if (!s.p->grad) continue;
    const auto& g = s.p->grad->data();
    auto& w = s.p->value.data();
    const Scalar rate = static_cast<Scalar>(lr * s.scale);
    if (s.p->decay) w *= Scalar(1) - rate * static_cast<Scalar>(cfg_.weight_decay);
    s.m = b1 * s.m + (Scalar(1) - b1) * g;
    s.v = b2 * s.v + (Scalar(1) - b2) * g.cwiseAbs2();
    w.array() -= rate * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps);
  }
}

ViewSpec parse_views(const std::string& text) {
  const auto x = text.find('x');
  ViewSpec v;
  try {
    if (x == std::string::npos) throw ConfigError("");
    v.temporal = parse_int("views", text.substr(0, x));
    v.spatial = parse_int("views", text.substr(x + 1));
  } catch (const ConfigError&) {
    throw ConfigError("views must look like TxS (e.g. 2x3), got '" + text + "'");
  }
  if (v.temporal < 1 || v.spatial < 1) throw ConfigError("view counts must be >= 1, got '" + text + "'");
  return v;
}

namespace {

Index view_offset(int k, int views, Index slack) { return views == 1 ? slack / 2 : k * slack / (views - 1); }

template <class Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& video, Index t0, Index y0, Index x0, Index F, Index H, Index W) {
  const Index B = video.dim(0), VF = video.dim(1), VH = video.dim(2), VW = video.dim(3), C = video.dim(4);
  Tensor<Scalar> out({B, F, H, W, C});
  for (Index b = 0; b < B; ++b)
    for (Index f = 0; f < F; ++f)
      for (Index y = 0; y < H; ++y) {
        const Scalar* src = video.ptr() + (((b * VF + t0 + f) * VH + y0 + y) * VW + x0) * C;
        std::copy(src, src + W * C, out.ptr() + ((b * F + f) * H + y) * W * C);
      }
  return out;
}

template <class Scalar>
std::vector<RowMatrix<double>> task_probabilities(const ModelOutput<Scalar>& out) {
  std::vector<RowMatrix<double>> probs;
  for (const auto& task : out.tasks) {
    RowMatrix<double> acc;
    for (const auto& m : task.members) {
      const RowMatrix<double> p = softmax_rows(m.value()).matrix().template cast<double>();
      if (acc.size() == 0) acc = p;
      else acc += p;
    }
    probs.push_back(acc / double(task.members.size()));
  }
  return probs;
}

}  // namespace

template <class Scalar>
std::vector<RowMatrix<double>> infer_multiview(const CastModel<Scalar>& model, const Tensor<Scalar>& video,
                                               ViewSpec views) {
  const CastConfig& cfg = model.config();
  if (views.temporal < 1 || views.spatial < 1) throw ConfigError("view counts must be >= 1");
  if (video.rank() != 5) throw DimensionError("video must be [B, F, H, W, C], got " + shape_string(video.shape()));
  if (video.dim(4) != cfg.channels) throw DimensionError("video channels do not match the model");
  const Index slack_t = video.dim(1) - cfg.frames, slack_y = video.dim(2) - cfg.height,
              slack_x = video.dim(3) - cfg.width;
  if (slack_t < 0) throw ConfigError("video has fewer frames than a clip (" + std::to_string(video.dim(1)) + ")");
  if (slack_y < 0 || slack_x < 0)
    throw ConfigError("crop " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + " larger than frame " +
                      std::to_string(video.dim(2)) + "x" + std::to_string(video.dim(3)));
  const bool along_x = slack_x >= slack_y;
  std::vector<RowMatrix<double>> total;
  for (int t = 0; t < views.temporal; ++t)
    for (int s = 0; s < views.spatial; ++s) {
      const Index t0 = view_offset(t, views.temporal, slack_t);
      const Index y0 = along_x ? slack_y / 2 : view_offset(s, views.spatial, slack_y);
      const Index x0 = along_x ? view_offset(s, views.spatial, slack_x) : slack_x / 2;
      Tape<Scalar> tape(false);
      auto probs = task_probabilities(
          model.forward(tape, crop(video, t0, y0, x0, cfg.frames, cfg.height, cfg.width), nullptr));
      if (total.empty()) total = std::move(probs);
      else
        for (std::size_t k = 0; k < total.size(); ++k) total[k] += probs[k];
    }
  for (auto& m : total) m /= double(views.count());
  return total;
}

int task_label(const std::string& task, const Sample& sample, int motion_classes) {
  if (task == "appearance") return sample.appearance;
  if (task == "motion") return sample.motion;
  if (task == "action") return sample.appearance * motion_classes + sample.motion;
  throw ConfigError("unknown task '" + task + "'");
}

MetricsReport score(const std::vector<TaskSpec>& tasks, const std::vector<RowMatrix<double>>& probs,
                    const Dataset& data, const std::vector<std::size_t>& indices) {
  MetricsReport r;
  std::vector<int> all_correct(indices.size(), 1);
  std::vector<double> accs;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    std::vector<int> pred(indices.size()), label(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      pred[i] = argmax_row(probs[k].row(static_cast<Index>(i)));
      label[i] = task_label(tasks[k].name, data.samples[indices[i]], data.motion_classes);
      all_correct[i] &= pred[i] == label[i];
    }
    const double acc = top1(pred, label);
    r.top1_per_task[tasks[k].name] = acc;
    accs.push_back(acc);
    const F1Report f1 = f1_scores(pred, label, tasks[k].classes);
    r.f1_per_class[tasks[k].name] = f1.f1;
    r.f1_weighted[tasks[k].name] = f1.weighted;
  }
  std::size_t hits = 0;
  for (int c : all_correct) hits += static_cast<std::size_t>(c);
  r.action_top1 = 100.0 * double(hits) / double(indices.size());
  std::string key;
  for (const auto& t : tasks) key += (key.empty() ? "" : "+") + t.name;
  const bool any_zero = std::any_of(accs.begin(), accs.end(), [](double a) { return a <= 0.0; });
  r.harmonic_means[key] = any_zero ? 0.0 : harmonic_mean(accs);
  return r;
}

template <class Scalar>
std::vector<RowMatrix<double>> predict(const CastModel<Scalar>& model, const Dataset& data,
                                       const std::vector<std::size_t>& indices, int batch_size, ViewSpec views,
                                       int threads) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  const auto n = indices.size();
  const auto bs = static_cast<std::size_t>(batch_size);
  const std::size_t batches = (n + bs - 1) / bs;
  std::vector<RowMatrix<double>> out;
  for (const auto& t : model.tasks()) out.emplace_back(static_cast<Index>(n), t.classes);
  parallel_for(
      batches,
      [&](std::size_t b) {
        const std::size_t lo = b * bs, hi = std::min(n, lo + bs);
        const std::vector<std::size_t> ids(indices.begin() + static_cast<std::ptrdiff_t>(lo),
                                           indices.begin() + static_cast<std::ptrdiff_t>(hi));
        const auto probs = infer_multiview(model, data.template batch<Scalar>(ids), views);
        for (std::size_t k = 0; k < out.size(); ++k)
          out[k].middleRows(static_cast<Index>(lo), static_cast<Index>(hi - lo)) = probs[k];
      },
      threads > 0 ? threads : worker_threads());
  return out;
}

template <class Scalar>
MetricsReport evaluate(const CastModel<Scalar>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                       int batch_size, ViewSpec views, int threads) {
  if (indices.empty()) throw ContractError("evaluation needs at least one sample");
  return score(model.tasks(), predict(model, data, indices, batch_size, views, threads), data, indices);
}

Split split_dataset(const Dataset& data, int train_count) {
  if (train_count < 0 || static_cast<std::size_t>(train_count) > data.samples.size())
    throw ConfigError("data.train_count " + std::to_string(train_count) + " exceeds the dataset size " +
                      std::to_string(data.samples.size()));
  Split s;
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    (i < static_cast<std::size_t>(train_count) ? s.train : s.val).push_back(i);
  return s;
}

void check_compatible(const CastConfig& cfg, const Dataset& data) {
  if (cfg.frames != data.frames || cfg.channels != data.channels || cfg.height > data.height || cfg.width > data.width)
    throw ConfigError("model clip geometry does not fit the dataset");
  for (const auto& t : task_specs(cfg)) {
    const int expected = t.name == "appearance" ? data.appearance_classes
                         : t.name == "motion"   ? data.motion_classes
                                                : data.appearance_classes * data.motion_classes;
    if (t.classes != expected)
      throw ConfigError("task '" + t.name + "' has " + std::to_string(t.classes) + " classes, dataset has " +
                        std::to_string(expected));
  }
}

template <class Scalar>
Var<Scalar> batch_loss(Tape<Scalar>& tape, const CastModel<Scalar>& model, const Dataset& data,
                       const std::vector<std::size_t>& indices, Scalar smoothing) {
  const auto out = model.forward(tape, data.template batch<Scalar>(indices));
  Var<Scalar> loss;
  for (std::size_t k = 0; k < out.tasks.size(); ++k) {
    std::vector<int> labels;
    for (std::size_t i : indices) labels.push_back(task_label(model.tasks()[k].name, data.samples[i], data.motion_classes));
    for (const auto& m : out.tasks[k].members) {
      Var<Scalar> ce = cross_entropy(m, std::span<const int>(labels), smoothing);
      loss = loss.tape ? add(loss, ce) : ce;
    }
  }
  return loss;
}

template <class Scalar>
TrainResult train(CastModel<Scalar>& model, const Dataset& data, const Split& split, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  check_compatible(model.config(), data);
  if (model.params().count_values(false) == 0) throw ContractError("model has no learnable parameters");
  if (split.train.empty()) throw ContractError("training split is empty");
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long per_epoch = static_cast<long>((split.train.size() + bs - 1) / bs);
  const long total = per_epoch * cfg.epochs, warmup = per_epoch * cfg.warmup_epochs;
  AdamW<Scalar> opt(model.params(), cfg, model.config().depth + 1);
  TrainResult result;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    Rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch))).shuffle(order.begin(), order.end());
    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += bs) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      const std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), lo + bs)));
      Tape<Scalar> tape;
      Var<Scalar> loss = batch_loss(tape, model, data, ids, static_cast<Scalar>(cfg.label_smoothing));
      loss_sum += double(loss.value()[0]) * double(ids.size());
      seen += ids.size();
      tape.backward(loss);
      log.lr = lr_at(step, total, warmup, cfg.lr);
      opt.step(log.lr);
      model.params().zero_grad();
      ++step;
    }
    const bool stopped = cfg.max_steps > 0 && step >= cfg.max_steps;
    log.train_loss = seen ? loss_sum / double(seen) : 0.0;
    const bool last = epoch == cfg.epochs || stopped;
    if (!split.val.empty() && (last || (cfg.val_every > 0 && epoch % cfg.val_every == 0))) {
      log.val = evaluate(model, data, split.val, cfg.batch_size);
      log.evaluated = true;
      result.final_val = log.val;
    }
    if (seen) {
      result.curve.push_back(log);
      if (on_epoch) on_epoch(log);
    }
    if (stopped) break;
  }
  result.steps = step;
  return result;
}

std::string metrics_json(const MetricsReport& r, std::uint64_t config_hash, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["top1_per_task"] = r.top1_per_task;
  j["action_top1"] = r.action_top1;
  j["harmonic_means"] = r.harmonic_means;
  j["f1_per_class"] = r.f1_per_class;
  j["f1_weighted"] = r.f1_weighted;
  j["config_hash"] = hex64(config_hash);
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

std::string loss_curve_csv(const std::vector<EpochLog>& curve) {
  std::ostringstream out;
  std::vector<std::string> tasks;
  for (const auto& e : curve)
    if (e.evaluated) {
      for (const auto& [name, _] : e.val.top1_per_task) tasks.push_back(name);
      break;
    }
  out << "epoch,lr,train_loss";
  for (const auto& t : tasks) out << ",val_" << t << "_top1";
  out << ",val_action_top1,val_harmonic_mean\n";
  for (const auto& e : curve) {
    out << e.epoch << ',' << fmt_double(e.lr) << ',' << fmt_double(e.train_loss);
    for (const auto& t : tasks) out << ',' << (e.evaluated ? fmt_double(e.val.top1_per_task.at(t)) : "");
    out << ',' << (e.evaluated ? fmt_double(e.val.action_top1) : "");
    out << ',' << (e.evaluated && !e.val.harmonic_means.empty() ? fmt_double(e.val.harmonic_means.begin()->second) : "");
    out << '\n';
  }
  return out.str();
}

#define CAST_INSTANTIATE_TRAIN(S)                                                                                   \
  template class AdamW<S>;                                                                                          \
  template std::vector<RowMatrix<double>> infer_multiview<S>(const CastModel<S>&, const Tensor<S>&, ViewSpec);     \
  template std::vector<RowMatrix<double>> predict<S>(const CastModel<S>&, const Dataset&,                          \
                                                     const std::vector<std::size_t>&, int, ViewSpec, int);         \
  template MetricsReport evaluate<S>(const CastModel<S>&, const Dataset&, const std::vector<std::size_t>&, int,    \
                                     ViewSpec, int);                                                               \
  template Var<S> batch_loss<S>(Tape<S>&, const CastModel<S>&, const Dataset&, const std::vector<std::size_t>&, S); \
  template TrainResult train<S>(CastModel<S>&, const Dataset&, const Split&, const TrainConfig&,                    \
                                const std::function<void(const EpochLog&)>&);

CAST_INSTANTIATE_TRAIN(float)
CAST_INSTANTIATE_TRAIN(double)

}  // namespace cast
