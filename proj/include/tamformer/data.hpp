#pragma once

// Synthetic pedestrian-like sequences, dataset files, and encoding-window
// augmentation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tamformer/numerics.hpp"

namespace tamformer {

inline constexpr int kDatasetFormatVersion = 1;

struct ModalityTrack {
  std::string name;
  Tensor track;  // [frames x width]
};

struct FeatureSequence {
  std::string sample_id;
  std::vector<ModalityTrack> modalities;
  int fps = 30;
  // Frame index of action onset; always past the last available frame.
  std::size_t event_frame = 0;
  int label = 0;  // 1 = crossing
  // Leading frames available before the standard encoding window.
  std::size_t history_margin = 0;

  std::size_t frames() const;
  // sample_id with any augmentation suffix removed.
  std::string base_id() const;
  void validate() const;
};

bool operator==(const FeatureSequence& a, const FeatureSequence& b);

enum class Split { train, val, test };
std::string to_string(Split s);

struct GeneratorConfig {
  std::size_t window_frames = 12;
  std::size_t max_margin = 15;
  std::size_t event_offset_frames = 30;
  int fps = 30;
  double balance = 0.5;
  // Local context, bounding box, pose, ego speed.
  std::size_t context_width = 16;
  std::size_t pose_width = 12;
  // Frames before onset over which class evidence ramps up.
  double evidence_ramp_frames = 60.0;
  double train_fraction = 0.7;
  double val_fraction = 0.0;
  double test_fraction = 0.3;

  void validate() const;
};

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  std::uint64_t seed = 0;
  GeneratorConfig generator;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::vector<std::string> train_ids, val_ids, test_ids;

  Split split_of(const std::string& base_id) const;
};

bool operator==(const DatasetManifest& a, const DatasetManifest& b);

struct Dataset {
  std::vector<FeatureSequence> samples;
  DatasetManifest manifest;

  std::vector<FeatureSequence> split(Split s) const;
};

// SplitMix64 finalizer and the per-sample seed derivation built on it.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index);

Dataset generate_synthetic(std::size_t n, std::uint64_t seed, const GeneratorConfig& config);

// Original plus copies whose window ends k*shift_step frames earlier, for
// k = 1..max_shifts while the history margin allows.
std::vector<FeatureSequence> augment(const FeatureSequence& sample, std::size_t max_shifts,
                                     std::size_t shift_step);

// Augments every sample of a training split and asserts that every copy
// belongs to the training split of the manifest.
std::vector<FeatureSequence> augment_training_split(const std::vector<FeatureSequence>& train,
                                                    const DatasetManifest& manifest,
                                                    std::size_t max_shifts,
                                                    std::size_t shift_step);

// JSON Lines samples at `path`, manifest at manifest_path(path).
std::filesystem::path manifest_path(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

std::string sample_to_json_line(const FeatureSequence& sample);
FeatureSequence sample_from_json_line(const std::string& line, std::size_t line_no);

// Fixed-precision decimal that parses back to the identical double.
std::string format_exact(double v);

}  // namespace tamformer
