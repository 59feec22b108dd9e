#include "tamformer/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

#include "tamformer/errors.hpp"

namespace tamformer {

std::optional<double> auc_mid_rank(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Ranks are doubled so mid-ranks of tie groups stay integral.
  std::size_t n_pos = 0;
  std::size_t pos_rank_sum2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::size_t mid2 = i + j + 1;  // 2 * average of 1-based ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        ++n_pos;
        pos_rank_sum2 += mid2;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  // U = R_pos - n_pos (n_pos + 1) / 2, all doubled.
  const std::size_t u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

Metrics compute_metrics(std::span<const double> scores, std::span<const int> labels,
                        double threshold) {
  if (scores.size() != labels.size()) {
    throw ContractError("compute_metrics: " + std::to_string(scores.size()) + " scores but " +
                        std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw ContractError("compute_metrics: empty input");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("compute_metrics: threshold must lie in (0,1)");
  }
  Metrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("compute_metrics: labels must be 0/1");
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      ++m.n_pos;
      pred ? ++m.confusion.tp : ++m.confusion.fn;
    } else {
      ++m.n_neg;
      pred ? ++m.confusion.fp : ++m.confusion.tn;
    }
  }
  const auto& c = m.confusion;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(scores.size());
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  m.f1 = c.tp == 0 ? 0.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
  m.auc = auc_mid_rank(scores, labels);
  return m;
}

}  // namespace tamformer
