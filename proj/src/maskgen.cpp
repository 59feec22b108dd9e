#include "tamformer/maskgen.hpp"

#include <cstdio>

#include "tamformer/errors.hpp"

namespace tamformer {

GridMap identity_grid(std::size_t steps) {
  GridMap g(steps);
  for (std::size_t i = 0; i < steps; ++i) g[i] = i;
  return g;
}

namespace {

std::vector<std::size_t> layer_sizes(std::size_t feature_width,
                                     const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> sizes{2 * feature_width};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  for (auto s : sizes) {
    if (s == 0) throw ContractError("mask scorer: layer sizes must be positive");
  }
  return sizes;
}

void check_grid(const GridMap& grid_map, std::size_t source_steps) {
  for (std::size_t t = 0; t < grid_map.size(); ++t) {
    if (grid_map[t] >= source_steps) {
      throw ContractError("grid_map[" + std::to_string(t) + "] = " + std::to_string(grid_map[t]) +
                          " is outside " + std::to_string(source_steps) + " source steps");
    }
    if (t > 0 && grid_map[t] < grid_map[t - 1]) {
      throw ContractError("grid_map must be nondecreasing");
    }
  }
}

}  // namespace

constexpr double kHiddenBiasInit = 0.01;

MaskScorerParams MaskScorerParams::init(std::size_t feature_width,
                                        const std::vector<std::size_t>& hidden,
                                        std::mt19937_64& rng) {
  const auto sizes = layer_sizes(feature_width, hidden);
  MaskScorerParams p;
  p.feature_width = feature_width;
  p.hidden = hidden;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    p.weights.push_back(glorot_uniform(sizes[l], sizes[l + 1], rng));
    // Hidden biases start slightly positive: a zero bias puts every pair whose
    // previous layer is all-negative exactly on the relu kink.
    const bool hidden_layer = l + 2 < sizes.size();
    p.biases.push_back(Tensor::full({sizes[l + 1]}, hidden_layer ? kHiddenBiasInit : 0.0, true));
  }
  return p;
}

MaskScorerParams MaskScorerParams::zeros(std::size_t feature_width,
                                         const std::vector<std::size_t>& hidden) {
  const auto sizes = layer_sizes(feature_width, hidden);
  MaskScorerParams p;
  p.feature_width = feature_width;
  p.hidden = hidden;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    p.weights.push_back(Tensor::zeros({sizes[l], sizes[l + 1]}, true));
    p.biases.push_back(Tensor::zeros({sizes[l + 1]}, true));
  }
  return p;
}

void MaskScorerParams::append_named(const std::string& prefix,
                                    std::vector<NamedTensor>& out) const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back({prefix + ".w" + std::to_string(l), weights[l]});
    out.push_back({prefix + ".b" + std::to_string(l), biases[l]});
  }
}

std::vector<bool> LearnedMask::causal_pattern() const {
  const std::size_t tk = source_steps();
  std::vector<bool> allowed(grid_map.size() * tk, false);
  for (std::size_t t = 0; t < grid_map.size(); ++t)
    for (std::size_t s = 0; s <= grid_map[t]; ++s) allowed[t * tk + s] = true;
  return allowed;
}

std::vector<RowPair> causal_pairs(const GridMap& grid_map, std::size_t source_steps) {
  check_grid(grid_map, source_steps);
  std::vector<RowPair> pairs;
  for (std::size_t t = 0; t < grid_map.size(); ++t)
    for (std::size_t s = 0; s <= grid_map[t]; ++s) pairs.push_back({t, s});
  return pairs;
}

LearnedMask predict_mask(const MaskScorerParams& scorer, const Tensor& target_feats,
                         const Tensor& source_feats, const GridMap& grid_map) {
  const std::size_t d = scorer.feature_width;
  if (target_feats.cols() != d || source_feats.cols() != d) {
    throw DimensionError("predict_mask: features " + shape_str(target_feats.shape()) + " / " +
                         shape_str(source_feats.shape()) + " do not match scorer width " +
                         std::to_string(d));
  }
  if (grid_map.size() != target_feats.rows()) {
    throw ContractError("predict_mask: grid_map has " + std::to_string(grid_map.size()) +
                        " rows but there are " + std::to_string(target_feats.rows()) +
                        " target steps");
  }
  const auto pairs = causal_pairs(grid_map, source_feats.rows());

  // The first layer acts on [target ; source], so it splits into two halves
  // applied per step and then summed per pair.
  const Tensor& w0 = scorer.weights.front();
  const Tensor a = matmul(target_feats, slice_rows(w0, 0, d));
  const Tensor b = matmul(source_feats, slice_rows(w0, d, 2 * d));
  Tensor h = add(pair_sum(a, b, pairs), scorer.biases.front());
  for (std::size_t l = 1; l < scorer.weights.size(); ++l) {
    h = add(matmul(relu(h), scorer.weights[l]), scorer.biases[l]);
  }
  return {scatter_pairs(sigmoid(h), pairs, grid_map.size(), source_feats.rows()), grid_map};
}

Tensor mask_to_bias(const LearnedMask& mask, double eps) {
  return masked_log(mask.values, mask.causal_pattern(), eps);
}

Tensor causal_bias(const GridMap& grid_map, std::size_t source_steps) {
  check_grid(grid_map, source_steps);
  std::vector<double> v(grid_map.size() * source_steps, 0.0);
  for (std::size_t t = 0; t < grid_map.size(); ++t)
    for (std::size_t s = grid_map[t] + 1; s < source_steps; ++s) v[t * source_steps + s] = -kLarge;
  return Tensor::from({grid_map.size(), source_steps}, std::move(v));
}

std::vector<RowSparsity> sparsity_stats(const LearnedMask& mask, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("sparsity_stats: threshold must lie in (0,1)");
  }
  std::vector<RowSparsity> out;
  for (std::size_t t = 0; t < mask.grid_map.size(); ++t) {
    RowSparsity r;
    r.frames_available = mask.grid_map[t] + 1;
    for (std::size_t s = 0; s <= mask.grid_map[t]; ++s)
      if (mask.values.at(t, s) >= threshold) ++r.frames_used;
    out.push_back(r);
  }
  return out;
}

std::string mask_to_csv(const LearnedMask& mask) {
  std::string out = "row,col,value\n";
  char buf[96];
  for (std::size_t r = 0; r < mask.target_steps(); ++r)
    for (std::size_t c = 0; c < mask.source_steps(); ++c) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f\n", r, c, mask.values.at(r, c));
      out += buf;
    }
  return out;
}

}  // namespace tamformer
