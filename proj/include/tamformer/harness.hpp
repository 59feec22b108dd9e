#pragma once

// Evaluation across anticipation times, report files, the F1-over-time plot,
// and mask dumps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tamformer/data.hpp"
#include "tamformer/metrics.hpp"
#include "tamformer/model.hpp"

namespace tamformer {

// Seconds from each query step to action onset, in query order (descending).
std::vector<double> query_anticipation_times(const FeatureSequence& sample,
                                             const ModelConfig& config);

// Query step whose time-to-onset is closest to t_a; ties go to the earlier
// frame. Throws RangeError outside [last step, first step].
std::size_t query_step_for_time(const FeatureSequence& sample, const ModelConfig& config,
                                double t_a);

struct TimeMetrics {
  double t_a = 0.0;
  double accuracy = 0.0;
  std::optional<double> auc;
  double f1 = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  double mean_frames_used = 0.0;
  double mean_frames_available = 0.0;
};

struct MetricsReport {
  std::vector<TimeMetrics> rows;  // descending t_a
  double threshold = 0.5;
  std::string auc_ties = "mid-rank";
  std::optional<std::uint64_t> seed;
  nlohmann::json config;
};

bool operator==(const TimeMetrics& a, const TimeMetrics& b);
bool operator==(const MetricsReport& a, const MetricsReport& b);

MetricsReport evaluate_at_times(const TamformerParams& params, const ModelConfig& config,
                                const std::vector<FeatureSequence>& samples,
                                std::vector<double> times, double threshold = 0.5);

enum class ReportFormat { csv, json };

std::string report_to_csv(const MetricsReport& report);
nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);
void emit_report(const MetricsReport& report, const std::filesystem::path& path,
                 ReportFormat format);
MetricsReport load_report(const std::filesystem::path& path);

// One polyline per report: x runs from the earliest anticipation time on the
// left toward onset on the right, y is F1.
std::string render_f1_plot(const std::vector<std::pair<std::string, MetricsReport>>& reports);
void plot_f1_over_time(const std::vector<std::pair<std::string, MetricsReport>>& reports,
                       const std::filesystem::path& path);

struct MaskDumpSummary {
  std::size_t files_written = 0;
  double mean_used_fraction_e = 0.0;
  double mean_used_fraction_d = 0.0;
};

// Writes <sample_id>_mask_e.csv and <sample_id>_mask_d.csv per sample.
MaskDumpSummary dump_masks(const TamformerParams& params, const ModelConfig& config,
                           const std::vector<FeatureSequence>& samples,
                           const std::filesystem::path& out_dir, double threshold = 0.5);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t parameters = 0;
};

// Finite-difference check of L_ce + L_r (gradient through the final
// embedding enabled) over every trainable tensor, at a generic parameter
// point drawn from the seed, on one random input window.
GradCheckReport grad_check_model(const ModelConfig& config, std::uint64_t seed,
                                 double eps = 1e-5);

// Parses "4,3,2,1".
std::vector<double> parse_times(const std::string& text);

}  // namespace tamformer
