#include "cast/metrics.hpp"

namespace cast {

double harmonic_mean(std::span<const double> values) {
  if (values.empty()) throw DomainError("harmonic mean of an empty set");
  double inv = 0.0;
  for (double v : values) {
    if (!(v > 0.0)) throw DomainError("harmonic mean requires positive values, got " + std::to_string(v));
    inv += 1.0 / v;
  }
  return static_cast<double>(values.size()) / inv;
}

F1Report f1_scores(std::span<const int> predictions, std::span<const int> labels, int num_classes,
                   std::span<const double> class_weights) {
  if (predictions.empty()) throw DomainError("F1 of an empty prediction set");
  if (predictions.size() != labels.size())
    throw DomainError("F1 needs aligned predictions and labels (" + std::to_string(predictions.size()) + " vs " +
                      std::to_string(labels.size()) + ")");
  if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(num_classes))
    throw DomainError("class weight count does not match class count");
  const auto C = static_cast<std::size_t>(num_classes);
  std::vector<long> tp(C, 0), predicted(C, 0);
  F1Report r;
  r.support.assign(C, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= num_classes || p < 0 || p >= num_classes)
      throw DomainError("class index out of range at position " + std::to_string(i));
    ++r.support[y];
    ++predicted[p];
    if (y == p) ++tp[y];
  }
  r.precision.resize(C);
  r.recall.resize(C);
  r.f1.resize(C);
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    r.precision[c] = predicted[c] ? double(tp[c]) / predicted[c] : 0.0;
    r.recall[c] = r.support[c] ? double(tp[c]) / r.support[c] : 0.0;
    const double pr = r.precision[c] + r.recall[c];
    r.f1[c] = pr > 0.0 ? 2.0 * r.precision[c] * r.recall[c] / pr : 0.0;
    if (r.support[c] == 0) {
      r.excluded.push_back(static_cast<int>(c));
      continue;
    }
    const double w = class_weights.empty() ? double(r.support[c]) : class_weights[c];
    num += w * r.f1[c];
    den += w;
  }
  r.weighted = den > 0.0 ? num / den : 0.0;
  return r;
}

double top1(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw DomainError("top-1 needs aligned, non-empty predictions and labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return 100.0 * double(hits) / double(labels.size());
}

}  // namespace cast
