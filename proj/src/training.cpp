#include "tamformer/training.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "tamformer/errors.hpp"
#include "tamformer/metrics.hpp"

namespace tamformer {

Tensor bce_loss(const PredictionTimeline& timeline, int label, double pos_weight) {
  if (!timeline.scores.defined() || timeline.scores.numel() == 0) {
    throw ContractError("bce_loss: empty timeline");
  }
  return binary_cross_entropy(timeline.scores, label, pos_weight);
}

Tensor reg_loss(const Tensor& embeddings, bool stop_target) {
  if (embeddings.rank() != 2 || embeddings.rows() < 2) {
    throw ContractError("reg_loss: need at least 2 query steps, got " +
                        shape_str(embeddings.shape()));
  }
  const std::size_t last = embeddings.rows() - 1;
  if (stop_target) {
    const Tensor target = stop_gradient(slice_rows(embeddings, last, last + 1));
    return sum_sq(add(embeddings, scale(target, -1.0)));
  }
  const std::vector<std::size_t> idx(embeddings.rows(), last);
  return sum_sq(sub(embeddings, gather_rows(embeddings, idx)));
}

void sgd_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
              double lr) {
  if (params.size() != grads.size()) {
    throw ContractError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].mutable_values();
    if (grads[i].size() != v.size()) {
      throw ContractError("sgd_step: gradient " + std::to_string(i) + " has " +
                          std::to_string(grads[i].size()) + " entries, parameter has " +
                          std::to_string(v.size()));
    }
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr * grads[i][k];
  }
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper(double lr) {
  TrainConfig t;
  t.lr = lr;
  t.epochs_stage1 = 500;
  t.epochs_stage2 = 500;
  return t;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("train config: lr must be positive");
  if (batch_size == 0) throw ContractError("train config: batch size must be positive");
  if (shift_step == 0) throw ContractError("train config: shift_step must be >= 1");
  if (!(reg_scale >= 0.0)) throw ContractError("train config: reg_scale must be >= 0");
  if (!(pos_weight > 0.0)) throw ContractError("train config: pos_weight must be positive");
}

std::string TrainLog::to_csv() const {
  std::string out = "epoch,stage,l_ce,l_r,l_total,acc,auc,f1\n";
  char buf[256];
  for (const auto& r : records) {
    char auc[32] = "";
    if (r.auc) std::snprintf(auc, sizeof auc, "%.6f", *r.auc);
    std::snprintf(buf, sizeof buf, "%zu,%d,%.10g,%.10g,%.10g,%.6f,%s,%.6f\n", r.epoch, r.stage,
                  r.l_ce, r.l_r, r.l_total, r.acc, auc, r.f1);
    out += buf;
  }
  return out;
}

SampleLosses sample_losses(const TamformerParams& params, const ModelConfig& config,
                           const FeatureSequence& sample, bool use_reg, const TrainConfig& train) {
  const PredictionTimeline tl = forward(params, config, sample);
  SampleLosses out;
  out.l_ce = bce_loss(tl, sample.label, train.pos_weight);
  out.l_r = tl.embeddings.rows() >= 2 ? reg_loss(tl.embeddings, train.stop_target)
                                      : Tensor::scalar(0.0);
  out.total = use_reg ? add(out.l_ce, scale(out.l_r, train.reg_scale)) : out.l_ce;
  out.final_score = tl.scores.values().back();
  return out;
}

double mean_reg_loss(const TamformerParams& params, const ModelConfig& config,
                     const std::vector<FeatureSequence>& samples) {
  if (samples.empty()) throw ContractError("mean_reg_loss: no samples");
  double total = 0.0;
  for (const auto& s : samples) total += reg_loss(forward(params, config, s).embeddings).item();
  return total / static_cast<double>(samples.size());
}

namespace {

void run_stage(TamformerParams& params, const ModelConfig& config, const TrainConfig& train,
               const std::vector<FeatureSequence>& samples, int stage, std::size_t epochs,
               bool use_reg, TrainLog& log) {
  std::vector<Tensor> tensors = params.parameters();
  const std::size_t n = samples.size();
  for (std::size_t e = 0; e < epochs; ++e) {
    const std::size_t epoch = log.records.size() + 1;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(train.seed, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double sum_ce = 0.0, sum_r = 0.0, sum_total = 0.0;
    std::vector<double> final_scores(n);
    std::vector<int> labels(n);
    for (std::size_t start = 0; start < n; start += train.batch_size) {
      const std::size_t stop = std::min(n, start + train.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      for (auto& t : tensors) t.zero_grad();
      for (std::size_t b = start; b < stop; ++b) {
        const auto& s = samples[order[b]];
        SampleLosses l = sample_losses(params, config, s, use_reg, train);
        const double total = l.total.item();
        if (!std::isfinite(total)) {
          throw DivergenceError("training diverged: loss is " + std::to_string(total) +
                                    " at epoch " + std::to_string(epoch),
                                epoch);
        }
        backward(scale(l.total, inv_batch));
        sum_ce += l.l_ce.item();
        sum_r += l.l_r.item();
        sum_total += total;
        final_scores[b] = l.final_score;
        labels[b] = s.label;
      }
      std::vector<std::vector<double>> grads;
      grads.reserve(tensors.size());
      for (const auto& t : tensors) {
        if (t.has_grad()) {
          grads.emplace_back(t.grad().begin(), t.grad().end());
        } else {
          grads.emplace_back(t.numel(), 0.0);
        }
      }
      sgd_step(tensors, grads, train.lr);
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage;
    rec.l_ce = sum_ce * inv_n;
    rec.l_r = sum_r * inv_n;
    rec.l_total = sum_total * inv_n;
    const Metrics m = compute_metrics(final_scores, labels);
    rec.acc = m.accuracy;
    rec.auc = m.auc;
    rec.f1 = m.f1;
    log.records.push_back(rec);
  }
  for (auto& t : tensors) t.zero_grad();
}

}  // namespace

TrainResult train_two_stage(const Dataset& dataset, const ModelConfig& config,
                            const TrainConfig& train) {
  config.validate();
  train.validate();
  const auto base = dataset.split(Split::train);
  if (base.empty()) throw ContractError("train_two_stage: training split is empty");
  const auto samples = train.augment ? augment_training_split(base, dataset.manifest,
                                                              train.max_shifts, train.shift_step)
                                     : base;

  TrainResult result;
  result.params = TamformerParams::init(config, train.seed);
  result.params.fit_input_standardization(config, base);

  run_stage(result.params, config, train, samples, 1, train.epochs_stage1, train.reg_stage1,
            result.log);
  result.stage1_params = result.params.deep_copy();
  if (train.checkpoint_dir) {
    save_checkpoint(*train.checkpoint_dir / "stage1.json", config, result.stage1_params);
  }
  run_stage(result.params, config, train, samples, 2, train.epochs_stage2, train.reg_stage2,
            result.log);
  if (train.checkpoint_dir) {
    save_checkpoint(*train.checkpoint_dir / "stage2.json", config, result.params);
  }
  return result;
}

}  // namespace tamformer
