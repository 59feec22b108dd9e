#pragma once

#include <cstddef>
#include <optional>
#include <span>

namespace tamformer {

struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct Metrics {
  double accuracy = 0.0;
  // Absent when only one class is present.
  std::optional<double> auc;
  double f1 = 0.0;
  ConfusionMatrix confusion;
  std::size_t n_pos = 0, n_neg = 0;
};

// Positive class is label 1 (crossing); predictions are score >= threshold.
// AUC gives tied positive/negative pairs half credit.
Metrics compute_metrics(std::span<const double> scores, std::span<const int> labels,
                        double threshold = 0.5);

// Mid-rank Mann-Whitney AUC.
std::optional<double> auc_mid_rank(std::span<const double> scores, std::span<const int> labels);

}  // namespace tamformer
