#pragma once

// TAMformer assembly: per-modality encoders on the full-rate grid, an
// early-fusion query branch on the sub-sampled grid, and a decoder that
// cross-attends from queries to the encoded sequence under a learned mask.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tamformer/blocks.hpp"
#include "tamformer/data.hpp"
#include "tamformer/maskgen.hpp"
#include "tamformer/numerics.hpp"

namespace tamformer {

inline constexpr int kCheckpointFormatVersion = 1;

struct ModelConfig {
  std::vector<std::string> modality_names;
  std::vector<std::size_t> raw_widths;       // input feature width per modality
  std::vector<std::size_t> modality_widths;  // D_m after the input projection
  std::size_t t_enc = 12;
  std::size_t query_stride = 3;
  std::size_t d_model = 8;  // attention width inside every block
  std::size_t heads = 2;
  std::size_t ff_dim = 16;
  std::size_t depth = 1;
  std::vector<std::size_t> mask_hidden{8, 4, 2};
  std::size_t head_hidden = 32;
  double mask_eps = 1e-6;
  double ln_eps = 1e-5;

  // Small configuration used for tests, grad checks and desk training.
  static ModelConfig desk();
  // Heads, feed-forward width, mask MLP sizes and window length as published.
  static ModelConfig paper();

  std::size_t modalities() const { return modality_names.size(); }
  std::size_t d_cat() const;
  std::size_t t_query() const { return t_enc / query_stride; }
  // Last frame of each stride group on the encoding grid.
  std::vector<std::size_t> query_frames() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
bool operator==(const ModelConfig& a, const ModelConfig& b);

struct TamformerParams {
  // Fixed per-channel standardization of raw inputs: (x - shift) * scale.
  std::vector<Tensor> input_shift, input_scale;
  std::vector<Tensor> proj_w, proj_b;  // Phi_m: [raw_m x D_m], [D_m]
  std::vector<std::vector<AttentionBlockParams>> encoders;  // [modality][layer]
  std::vector<AttentionBlockParams> query_blocks;
  std::vector<AttentionBlockParams> decoder_blocks;
  Tensor out_norm_gain, out_norm_bias;  // final layer norm producing z_d
  MaskScorerParams enc_mask, dec_mask;
  Tensor head_w1, head_b1, head_w2, head_b2;

  static TamformerParams init(const ModelConfig& config, std::uint64_t seed);

  // Every tensor, including the fixed standardization buffers.
  std::vector<NamedTensor> named_tensors() const;
  // Trainable tensors only, in a stable order.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  // Sets the standardization buffers from per-channel training statistics.
  void fit_input_standardization(const ModelConfig& config,
                                 const std::vector<FeatureSequence>& samples);
  TamformerParams deep_copy() const;
};

// Closed-form trainable parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

struct PredictionTimeline {
  std::vector<std::size_t> query_frames;  // on the encoding window grid
  Tensor scores;                          // [T_q x 1], probabilities
  Tensor embeddings;                      // z_d, [T_q x D_cat]

  std::vector<double> probabilities() const;
};

struct ForwardTrace {
  LearnedMask mask_e;
  LearnedMask mask_d;
  // Attention weights of every block in evaluation order, [heads x T_q x T_k].
  std::vector<Tensor> attention;
};

// Last t_enc frames of every modality track.
std::vector<Tensor> encoding_window(const FeatureSequence& sample, const ModelConfig& config);
// Absolute index (in the sample's own frames) of window frame 0.
std::size_t window_start(const FeatureSequence& sample, const ModelConfig& config);

// x_m = Phi_m(standardize(raw_m)), [t_enc x D_m] each.
std::vector<Tensor> project_inputs(const TamformerParams& params, const ModelConfig& config,
                                   const std::vector<Tensor>& raw);

Tensor encode(const TamformerParams& params, const ModelConfig& config,
              const std::vector<Tensor>& x, const LearnedMask& mask_e,
              std::vector<Tensor>* attention = nullptr);

struct QueryBatch {
  Tensor z_q;
  std::vector<std::size_t> query_frames;
};

QueryBatch build_queries(const TamformerParams& params, const ModelConfig& config,
                         const std::vector<Tensor>& x, std::vector<Tensor>* attention = nullptr);

PredictionTimeline forward_window(const TamformerParams& params, const ModelConfig& config,
                                  const std::vector<Tensor>& raw, ForwardTrace* trace = nullptr);
PredictionTimeline forward(const TamformerParams& params, const ModelConfig& config,
                           const FeatureSequence& sample, ForwardTrace* trace = nullptr);

struct Checkpoint {
  ModelConfig config;
  TamformerParams params;
};

std::string checkpoint_to_string(const ModelConfig& config, const TamformerParams& params);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const TamformerParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tamformer
