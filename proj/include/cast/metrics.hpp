#pragma once

#include "cast/core.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace cast {

/// n / sum(1 / v_i). Throws DomainError on empty input or any value <= 0.
double harmonic_mean(std::span<const double> values);
inline double harmonic_mean(std::initializer_list<double> values) {
  return harmonic_mean(std::span<const double>(values.begin(), values.size()));
}

struct F1Report {
  std::vector<double> precision, recall, f1;
  std::vector<long> support;
  /// Classes with zero support; they are left out of the weighted average.
  std::vector<int> excluded;
  double weighted = 0.0;
};

/// Per-class precision/recall/F1 and their average weighted by `class_weights`
/// (class support when empty). Throws DomainError on empty or misaligned input.
F1Report f1_scores(std::span<const int> predictions, std::span<const int> labels, int num_classes,
                   std::span<const double> class_weights = {});

/// Percentage of positions where predictions equal labels.
double top1(std::span<const int> predictions, std::span<const int> labels);

/// Index of the largest entry; ties go to the lowest index.
template <class Derived>
int argmax_row(const Eigen::DenseBase<Derived>& row) {
  int best = 0;
  for (Index c = 1; c < row.size(); ++c)
    if (row(c) > row(best)) best = static_cast<int>(c);
  return best;
}

struct MetricsReport {
  std::map<std::string, double> top1_per_task;
  double action_top1 = 0.0;
  std::map<std::string, double> harmonic_means;
  std::map<std::string, std::vector<double>> f1_per_class;
  std::map<std::string, double> f1_weighted;
};

}  // namespace cast
