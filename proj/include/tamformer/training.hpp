#pragma once

// Losses, plain SGD, and the two-stage procedure: cross-entropy pre-training
// followed by tuning with the anticipation-gap regularizer added.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tamformer/data.hpp"
#include "tamformer/model.hpp"
#include "tamformer/numerics.hpp"

namespace tamformer {

Tensor bce_loss(const PredictionTimeline& timeline, int label, double pos_weight = 1.0);

// Sum over steps of ||z[t] - z[T]||^2 with T the final step. With
// stop_target the final row is treated as a constant.
Tensor reg_loss(const Tensor& embeddings, bool stop_target = true);

// theta <- theta - lr * g, per tensor.
void sgd_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
              double lr);

struct TrainConfig {
  double lr = 1e-2;
  std::size_t epochs_stage1 = 150;
  std::size_t epochs_stage2 = 150;
  std::size_t batch_size = 8;
  std::uint64_t seed = 7;
  bool augment = true;
  std::size_t max_shifts = 5;
  std::size_t shift_step = 3;
  bool reg_stage1 = false;
  bool reg_stage2 = true;
  double reg_scale = 1.0;
  bool stop_target = true;
  double pos_weight = 1.0;
  // Checkpoints stage1.json / stage2.json are written here when set.
  std::optional<std::filesystem::path> checkpoint_dir;

  static TrainConfig desk();
  // 500 + 500 epochs at the given learning rate (1e-5 PIE, 1e-2 JAAD_all,
  // 1e-3 JAAD_beh).
  static TrainConfig paper(double lr);
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, counted across both stages
  int stage = 1;
  double l_ce = 0.0;
  double l_r = 0.0;
  double l_total = 0.0;
  double acc = 0.0;
  std::optional<double> auc;
  double f1 = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> records;
  std::string to_csv() const;
};

struct TrainResult {
  TamformerParams params;
  TamformerParams stage1_params;
  TrainLog log;
};

struct SampleLosses {
  Tensor l_ce;
  Tensor l_r;
  Tensor total;
  double final_score = 0.0;
};

// Per-sample loss graph; total = l_ce + reg_scale * l_r when use_reg.
SampleLosses sample_losses(const TamformerParams& params, const ModelConfig& config,
                           const FeatureSequence& sample, bool use_reg, const TrainConfig& train);

double mean_reg_loss(const TamformerParams& params, const ModelConfig& config,
                     const std::vector<FeatureSequence>& samples);

TrainResult train_two_stage(const Dataset& dataset, const ModelConfig& config,
                            const TrainConfig& train);

}  // namespace tamformer
