#pragma once

// Learned causal soft attention masks. A pairwise scoring MLP rates every
// (target step, source frame) pair on the causal side of the frontier; the
// sigmoid of that score is the mask entry. Entries beyond the frontier are 0.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tamformer/blocks.hpp"
#include "tamformer/numerics.hpp"

namespace tamformer {

// Maps each query row to the last source frame it may see.
using GridMap = std::vector<std::size_t>;

GridMap identity_grid(std::size_t steps);

struct MaskScorerParams {
  std::size_t feature_width = 0;      // D_cat
  std::vector<std::size_t> hidden;    // e.g. {128, 64, 32}
  std::vector<Tensor> weights;        // weights[0] is [2*D_cat x hidden[0]]; last is [.. x 1]
  std::vector<Tensor> biases;

  static MaskScorerParams init(std::size_t feature_width, const std::vector<std::size_t>& hidden,
                               std::mt19937_64& rng);
  static MaskScorerParams zeros(std::size_t feature_width, const std::vector<std::size_t>& hidden);
  void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct LearnedMask {
  Tensor values;  // [T_q x T_k]
  GridMap grid_map;

  std::size_t target_steps() const { return values.rows(); }
  std::size_t source_steps() const { return values.cols(); }
  // True where row may attend col.
  std::vector<bool> causal_pattern() const;
};

// Causal (target, source) pairs in row-major order.
std::vector<RowPair> causal_pairs(const GridMap& grid_map, std::size_t source_steps);

LearnedMask predict_mask(const MaskScorerParams& scorer, const Tensor& target_feats,
                         const Tensor& source_feats, const GridMap& grid_map);

// ln(mask + eps) on the causal side, -kLarge beyond the frontier.
Tensor mask_to_bias(const LearnedMask& mask, double eps = 1e-6);

// 0 on the causal side, -kLarge beyond the frontier. Used where no learned
// mask applies (query self-attention).
Tensor causal_bias(const GridMap& grid_map, std::size_t source_steps);

struct RowSparsity {
  std::size_t frames_used = 0;
  std::size_t frames_available = 0;
};

std::vector<RowSparsity> sparsity_stats(const LearnedMask& mask, double threshold = 0.5);

// CSV with header row,col,value; one line per entry in row-major order.
std::string mask_to_csv(const LearnedMask& mask);

}  // namespace tamformer
