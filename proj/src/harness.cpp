#include "tamformer/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "tamformer/errors.hpp"
#include "tamformer/training.hpp"

namespace tamformer {

using nlohmann::json;

namespace {

constexpr double kTimeTolerance = 1e-9;

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace

std::vector<double> query_anticipation_times(const FeatureSequence& sample,
                                             const ModelConfig& config) {
  const std::size_t start = window_start(sample, config);
  std::vector<double> out;
  for (auto f : config.query_frames()) {
    const std::size_t abs = start + f;
    out.push_back(static_cast<double>(sample.event_frame - abs) / sample.fps);
  }
  return out;
}

std::size_t query_step_for_time(const FeatureSequence& sample, const ModelConfig& config,
                                double t_a) {
  const auto times = query_anticipation_times(sample, config);
  const double hi = times.front(), lo = times.back();
  if (!(t_a >= lo - kTimeTolerance && t_a <= hi + kTimeTolerance)) {
    throw RangeError("anticipation time " + fmt("%g", t_a) + " s is outside the observable range [" +
                     fmt("%g", lo) + ", " + fmt("%g", hi) + "] s of sample " + sample.sample_id);
  }
  std::size_t best = 0;
  double best_gap = std::abs(times[0] - t_a);
  for (std::size_t q = 1; q < times.size(); ++q) {
    const double gap = std::abs(times[q] - t_a);
    if (gap < best_gap - kTimeTolerance) {  // ties (within roundoff) keep the earlier step
      best = q;
      best_gap = gap;
    }
  }
  return best;
}

bool operator==(const TimeMetrics& a, const TimeMetrics& b) {
  return a.t_a == b.t_a && a.accuracy == b.accuracy && a.auc == b.auc && a.f1 == b.f1 &&
         a.n_pos == b.n_pos && a.n_neg == b.n_neg && a.mean_frames_used == b.mean_frames_used &&
         a.mean_frames_available == b.mean_frames_available;
}

bool operator==(const MetricsReport& a, const MetricsReport& b) {
  return a.rows == b.rows && a.threshold == b.threshold && a.auc_ties == b.auc_ties &&
         a.seed == b.seed && a.config == b.config;
}

MetricsReport evaluate_at_times(const TamformerParams& params, const ModelConfig& config,
                                const std::vector<FeatureSequence>& samples,
                                std::vector<double> times, double threshold) {
  if (samples.empty()) throw ContractError("evaluate_at_times: no samples");
  if (times.empty()) throw ContractError("evaluate_at_times: no anticipation times");
  std::sort(times.begin(), times.end(), std::greater<>());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  // Validate every mapping before running the model.
  std::vector<std::vector<std::size_t>> steps(times.size());
  for (std::size_t k = 0; k < times.size(); ++k)
    for (const auto& s : samples) steps[k].push_back(query_step_for_time(s, config, times[k]));

  std::vector<std::vector<double>> scores(samples.size());
  std::vector<std::vector<RowSparsity>> sparsity(samples.size());
  std::vector<int> labels;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ForwardTrace trace;
    scores[i] = forward(params, config, samples[i], &trace).probabilities();
    sparsity[i] = sparsity_stats(trace.mask_d, threshold);
    labels.push_back(samples[i].label);
  }

  MetricsReport report;
  report.threshold = threshold;
  report.config = json(config);
  for (std::size_t k = 0; k < times.size(); ++k) {
    std::vector<double> at;
    double used = 0.0, avail = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const std::size_t q = steps[k][i];
      at.push_back(scores[i][q]);
      used += static_cast<double>(sparsity[i][q].frames_used);
      avail += static_cast<double>(sparsity[i][q].frames_available);
    }
    const Metrics m = compute_metrics(at, labels, threshold);
    TimeMetrics row;
    row.t_a = times[k];
    row.accuracy = m.accuracy;
    row.auc = m.auc;
    row.f1 = m.f1;
    row.n_pos = m.n_pos;
    row.n_neg = m.n_neg;
    row.mean_frames_used = used / static_cast<double>(samples.size());
    row.mean_frames_available = avail / static_cast<double>(samples.size());
    report.rows.push_back(row);
  }
  return report;
}

std::string report_to_csv(const MetricsReport& report) {
  std::string out = "t_a,acc,auc,f1,n_pos,n_neg,mean_frames_used,mean_frames_available\n";
  for (const auto& r : report.rows) {
    out += fmt("%.4f", r.t_a) + "," + fmt("%.4f", r.accuracy) + "," +
           (r.auc ? fmt("%.4f", *r.auc) : std::string()) + "," + fmt("%.4f", r.f1) + "," +
           std::to_string(r.n_pos) + "," + std::to_string(r.n_neg) + "," +
           fmt("%.4f", r.mean_frames_used) + "," + fmt("%.4f", r.mean_frames_available) + "\n";
  }
  return out;
}

json report_to_json(const MetricsReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"t_a", r.t_a},
                    {"acc", r.accuracy},
                    {"auc", r.auc ? json(*r.auc) : json(nullptr)},
                    {"f1", r.f1},
                    {"n_pos", r.n_pos},
                    {"n_neg", r.n_neg},
                    {"mean_frames_used", r.mean_frames_used},
                    {"mean_frames_available", r.mean_frames_available}});
  }
  json j{{"threshold", report.threshold},
         {"auc_ties", report.auc_ties},
         {"seed", report.seed ? json(*report.seed) : json(nullptr)},
         {"config", report.config},
         {"rows", rows}};
  return j;
}

MetricsReport report_from_json(const json& j) {
  try {
    MetricsReport r;
    r.threshold = j.at("threshold").get<double>();
    r.auc_ties = j.at("auc_ties").get<std::string>();
    if (!j.at("seed").is_null()) r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.at("config");
    for (const auto& row : j.at("rows")) {
      TimeMetrics t;
      t.t_a = row.at("t_a").get<double>();
      t.accuracy = row.at("acc").get<double>();
      if (!row.at("auc").is_null()) t.auc = row.at("auc").get<double>();
      t.f1 = row.at("f1").get<double>();
      t.n_pos = row.at("n_pos").get<std::size_t>();
      t.n_neg = row.at("n_neg").get<std::size_t>();
      t.mean_frames_used = row.at("mean_frames_used").get<double>();
      t.mean_frames_available = row.at("mean_frames_available").get<double>();
      r.rows.push_back(t);
    }
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
}

void emit_report(const MetricsReport& report, const std::filesystem::path& path,
                 ReportFormat format) {
  write_text(path, format == ReportFormat::csv ? report_to_csv(report)
                                               : report_to_json(report).dump(2) + "\n");
}

MetricsReport load_report(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read report " + path.string());
  try {
    return report_from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

namespace {

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_f1_plot(const std::vector<std::pair<std::string, MetricsReport>>& reports) {
  if (reports.empty()) throw ContractError("plot_f1_over_time: no reports");
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 160, kTop = 30, kBottom = 50;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  double t_min = 0.0, t_max = 0.0;
  bool first = true;
  for (const auto& [name, rep] : reports) {
    if (rep.rows.empty()) throw ContractError("plot_f1_over_time: report " + name + " is empty");
    for (const auto& r : rep.rows) {
      t_min = first ? r.t_a : std::min(t_min, r.t_a);
      t_max = first ? r.t_a : std::max(t_max, r.t_a);
      first = false;
    }
  }
  const double span = t_max > t_min ? t_max - t_min : 1.0;
  auto x_of = [&](double t) {
    return t_max > t_min ? kLeft + (t_max - t) / span * pw : kLeft + pw / 2;
  };
  auto y_of = [&](double f1) { return kTop + (1.0 - f1) * ph; };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
         "viewBox=\"0 0 640 400\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
  svg += "<g stroke=\"black\" stroke-width=\"1\">\n";
  svg += "<line x1=\"" + fmt("%.2f", kLeft) + "\" y1=\"" + fmt("%.2f", kTop + ph) + "\" x2=\"" +
         fmt("%.2f", kLeft + pw) + "\" y2=\"" + fmt("%.2f", kTop + ph) + "\"/>\n";
  svg += "<line x1=\"" + fmt("%.2f", kLeft) + "\" y1=\"" + fmt("%.2f", kTop) + "\" x2=\"" +
         fmt("%.2f", kLeft) + "\" y2=\"" + fmt("%.2f", kTop + ph) + "\"/>\n";
  svg += "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0;
    svg += "<text x=\"" + fmt("%.2f", kLeft - 8) + "\" y=\"" + fmt("%.2f", y_of(f) + 4) +
           "\" text-anchor=\"end\">" + fmt("%.2f", f) + "</text>\n";
  }
  std::vector<double> ticks;
  for (const auto& [name, rep] : reports)
    for (const auto& r : rep.rows) ticks.push_back(r.t_a);
  std::sort(ticks.begin(), ticks.end(), std::greater<>());
  ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
  for (double t : ticks) {
    svg += "<text x=\"" + fmt("%.2f", x_of(t)) + "\" y=\"" + fmt("%.2f", kTop + ph + 16) +
           "\" text-anchor=\"middle\">" + fmt("%g", t) + "</text>\n";
  }
  svg += "<text x=\"" + fmt("%.2f", kLeft + pw / 2) + "\" y=\"" + fmt("%.2f", kH - 10) +
         "\" text-anchor=\"middle\">anticipation time t_a (s)</text>\n";
  svg += "<text x=\"14\" y=\"" + fmt("%.2f", kTop + ph / 2) +
         "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " + fmt("%.2f", kTop + ph / 2) +
         ")\">F1</text>\n</g>\n";

  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& [name, rep] = reports[i];
    const char* color = kColors[i % std::size(kColors)];
    std::vector<TimeMetrics> rows = rep.rows;
    std::sort(rows.begin(), rows.end(),
              [](const TimeMetrics& a, const TimeMetrics& b) { return a.t_a > b.t_a; });
    std::string pts;
    for (const auto& r : rows) {
      if (!pts.empty()) pts += ' ';
      pts += fmt("%.3f", x_of(r.t_a)) + "," + fmt("%.3f", y_of(r.f1));
    }
    svg += "<polyline data-name=\"" + xml_escape(name) + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = kTop + 14 + 18 * static_cast<double>(i);
    svg += "<line x1=\"" + fmt("%.2f", kLeft + pw + 16) + "\" y1=\"" + fmt("%.2f", ly) +
           "\" x2=\"" + fmt("%.2f", kLeft + pw + 36) + "\" y2=\"" + fmt("%.2f", ly) +
           "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + fmt("%.2f", kLeft + pw + 42) + "\" y=\"" + fmt("%.2f", ly + 4) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + xml_escape(name) + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

void plot_f1_over_time(const std::vector<std::pair<std::string, MetricsReport>>& reports,
                       const std::filesystem::path& path) {
  write_text(path, render_f1_plot(reports));
}

MaskDumpSummary dump_masks(const TamformerParams& params, const ModelConfig& config,
                           const std::vector<FeatureSequence>& samples,
                           const std::filesystem::path& out_dir, double threshold) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  MaskDumpSummary summary;
  double frac_e = 0.0, frac_d = 0.0;
  std::size_t rows_e = 0, rows_d = 0;
  for (const auto& s : samples) {
    ForwardTrace trace;
    forward(params, config, s, &trace);
    write_text(out_dir / (s.sample_id + "_mask_e.csv"), mask_to_csv(trace.mask_e));
    write_text(out_dir / (s.sample_id + "_mask_d.csv"), mask_to_csv(trace.mask_d));
    summary.files_written += 2;
    for (const auto& r : sparsity_stats(trace.mask_e, threshold)) {
      frac_e += static_cast<double>(r.frames_used) / static_cast<double>(r.frames_available);
      ++rows_e;
    }
    for (const auto& r : sparsity_stats(trace.mask_d, threshold)) {
      frac_d += static_cast<double>(r.frames_used) / static_cast<double>(r.frames_available);
      ++rows_d;
    }
  }
  if (rows_e) summary.mean_used_fraction_e = frac_e / static_cast<double>(rows_e);
  if (rows_d) summary.mean_used_fraction_d = frac_d / static_cast<double>(rows_d);
  return summary;
}

namespace {

// Moves every trainable tensor to a generic point: fresh Glorot draws for
// matrices, U(-0.5, 0.5) offsets for vectors (around 1 for layer-norm gains).
// The initial point is special (zero biases sit on relu kinks, the small head
// shrinks every gradient toward the finite-difference noise floor).
void randomize_parameters(TamformerParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> offset(-0.5, 0.5);
  for (auto& nt : params.named_parameters()) {
    auto v = nt.tensor.mutable_values();
    if (nt.tensor.rank() == 2) {
      const double a = std::sqrt(6.0 / static_cast<double>(nt.tensor.rows() + nt.tensor.cols()));
      std::uniform_real_distribution<double> glorot(-a, a);
      for (auto& x : v) x = glorot(rng);
    } else {
      const double center = nt.name.find("gain") != std::string::npos ? 1.0 : 0.0;
      for (auto& x : v) x = center + offset(rng);
    }
  }
}

}  // namespace

GradCheckReport grad_check_model(const ModelConfig& config, std::uint64_t seed, double eps) {
  TamformerParams params = TamformerParams::init(config, seed);
  randomize_parameters(params, derive_seed(seed, 0xA11CE));
  std::mt19937_64 rng(derive_seed(seed, 0xC0FFEE));
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<Tensor> raw;
  for (std::size_t m = 0; m < config.modalities(); ++m) {
    std::vector<double> v(config.t_enc * config.raw_widths[m]);
    for (auto& x : v) x = unit(rng);
    raw.push_back(Tensor::from({config.t_enc, config.raw_widths[m]}, std::move(v)));
  }
  auto build = [&]() {
    const PredictionTimeline tl = forward_window(params, config, raw);
    Tensor loss = bce_loss(tl, 1);
    if (tl.embeddings.rows() >= 2) loss = add(loss, reg_loss(tl.embeddings, false));
    return loss;
  };
  std::vector<Tensor> tensors = params.parameters();
  GradCheckReport report;
  report.parameters = params.parameter_count();
  report.max_rel_error = grad_check(build, tensors, eps);
  for (auto& t : tensors) t.zero_grad();
  return report;
}

std::vector<double> parse_times(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ContractError("cannot parse anticipation time '" + item + "'");
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (used != item.size() || !std::isfinite(v)) {
      throw ContractError("cannot parse anticipation time '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ContractError("no anticipation times given");
  return out;
}

}  // namespace tamformer
