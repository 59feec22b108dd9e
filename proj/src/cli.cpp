#include "tamformer/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tamformer/data.hpp"
#include "tamformer/errors.hpp"
#include "tamformer/harness.hpp"
#include "tamformer/model.hpp"
#include "tamformer/training.hpp"

namespace tamformer {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json read_json_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void apply_train_overrides(const json& j, TrainConfig& t) {
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("lr", t.lr);
  opt("epochs_stage1", t.epochs_stage1);
  opt("epochs_stage2", t.epochs_stage2);
  opt("batch_size", t.batch_size);
  opt("augment", t.augment);
  opt("max_shifts", t.max_shifts);
  opt("shift_step", t.shift_step);
  opt("reg_stage1", t.reg_stage1);
  opt("reg_stage2", t.reg_stage2);
  opt("reg_scale", t.reg_scale);
  opt("stop_target", t.stop_target);
  opt("pos_weight", t.pos_weight);
}

// {"model": {...}, "train": {...}}; a bare object is read as model overrides.
void apply_config_file(const std::string& path, ModelConfig& model, TrainConfig* train) {
  if (path.empty()) return;
  const json j = read_json_file(path);
  try {
    if (j.contains("model") || j.contains("train")) {
      if (j.contains("model")) from_json(j.at("model"), model);
      if (train && j.contains("train")) apply_train_overrides(j.at("train"), *train);
    } else {
      from_json(j, model);
    }
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  model.validate();
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ContractError("unknown split " + s);
}

std::vector<FeatureSequence> split_or_throw(const Dataset& ds, const std::string& name) {
  auto samples = ds.split(parse_split(name));
  if (samples.empty()) throw ContractError("split " + name + " is empty");
  return samples;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tamformer: early intent prediction with learned attention masks"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::size_t gen_n = 0;
  std::uint64_t gen_seed = 7;
  std::string gen_out;
  GeneratorConfig gen_cfg;
  gen->add_option("--n", gen_n, "sample count")->required();
  gen->add_option("--seed", gen_seed, "master seed");
  gen->add_option("--out", gen_out, "output .jsonl path")->required();
  gen->add_option("--balance", gen_cfg.balance, "fraction of crossing samples");
  gen->add_option("--window", gen_cfg.window_frames, "encoding window frames");
  gen->add_option("--max-margin", gen_cfg.max_margin, "max extra history frames");
  gen->add_option("--event-offset", gen_cfg.event_offset_frames, "frames from last frame to onset");
  gen->add_option("--train-frac", gen_cfg.train_fraction);
  gen->add_option("--val-frac", gen_cfg.val_fraction);
  gen->add_option("--test-frac", gen_cfg.test_fraction);

  // train
  auto* train = app.add_subcommand("train", "two-stage training");
  std::string tr_data, tr_config, tr_out, tr_profile = "desk", tr_stage2 = "on";
  std::uint64_t tr_seed = 7;
  double tr_lr = 0.0;
  train->add_option("--data", tr_data, "dataset .jsonl")->required();
  train->add_option("--config", tr_config, "JSON overrides {model:{..}, train:{..}}");
  train->add_option("--out", tr_out, "output directory")->required();
  train->add_option("--profile", tr_profile)->check(CLI::IsMember({"desk", "paper"}));
  train->add_option("--stage2", tr_stage2)->check(CLI::IsMember({"on", "off"}));
  train->add_option("--seed", tr_seed);
  train->add_option("--lr", tr_lr, "learning rate override");

  // eval
  auto* eval = app.add_subcommand("eval", "metrics at anticipation times");
  std::string ev_data, ev_ckpt, ev_times, ev_report, ev_split = "test", ev_format;
  double ev_threshold = 0.5;
  eval->add_option("--data", ev_data)->required();
  eval->add_option("--checkpoint", ev_ckpt)->required();
  eval->add_option("--times", ev_times, "comma-separated seconds, e.g. 4,3,2,1")->required();
  eval->add_option("--report", ev_report, "report path (.json or .csv)")->required();
  eval->add_option("--format", ev_format)->check(CLI::IsMember({"csv", "json"}));
  eval->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--threshold", ev_threshold);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check");
  std::string gc_config, gc_profile = "desk";
  double gc_eps = 1e-5;
  std::uint64_t gc_seed = 7;
  gc->add_option("--config", gc_config);
  gc->add_option("--profile", gc_profile)->check(CLI::IsMember({"desk", "paper"}));
  gc->add_option("--eps", gc_eps);
  gc->add_option("--seed", gc_seed);

  // dump-masks
  auto* dm = app.add_subcommand("dump-masks", "write learned masks as CSV");
  std::string dm_data, dm_ckpt, dm_out, dm_split = "test";
  double dm_threshold = 0.5;
  std::size_t dm_limit = 0;
  dm->add_option("--data", dm_data)->required();
  dm->add_option("--checkpoint", dm_ckpt)->required();
  dm->add_option("--out", dm_out)->required();
  dm->add_option("--threshold", dm_threshold);
  dm->add_option("--split", dm_split)->check(CLI::IsMember({"train", "val", "test"}));
  dm->add_option("--limit", dm_limit, "max samples (0 = all)");

  // plot
  auto* plot = app.add_subcommand("plot", "F1 over anticipation time as SVG");
  std::vector<std::string> pl_reports;
  std::string pl_out;
  plot->add_option("--reports", pl_reports, "JSON reports")->required();
  plot->add_option("--out", pl_out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) {
      const Dataset ds = generate_synthetic(gen_n, gen_seed, gen_cfg);
      ensure_parent(gen_out);
      save_dataset(gen_out, ds);
      out << "wrote " << ds.samples.size() << " samples (" << ds.manifest.n_pos << " crossing, "
          << ds.manifest.n_neg << " not crossing) to " << gen_out << "\n";
      return 0;
    }
    if (train->parsed()) {
      ModelConfig model = tr_profile == "paper" ? ModelConfig::paper() : ModelConfig::desk();
      TrainConfig tc = tr_profile == "paper" ? TrainConfig::paper(1e-2) : TrainConfig::desk();
      apply_config_file(tr_config, model, &tc);
      tc.seed = tr_seed;
      if (tr_lr > 0.0) tc.lr = tr_lr;
      if (tr_stage2 == "off") tc.epochs_stage2 = 0;
      fs::create_directories(tr_out);
      tc.checkpoint_dir = fs::path(tr_out);
      const Dataset ds = load_dataset(tr_data);
      const TrainResult r = train_two_stage(ds, model, tc);
      std::ofstream log(fs::path(tr_out) / "train_log.csv", std::ios::binary);
      if (!log) throw IoError("cannot write " + (fs::path(tr_out) / "train_log.csv").string());
      log << r.log.to_csv();
      save_checkpoint(fs::path(tr_out) / "model.json", model, r.params);
      if (!r.log.records.empty()) {
        const auto& last = r.log.records.back();
        out << "epochs " << last.epoch << "  l_ce " << last.l_ce << "  l_r " << last.l_r
            << "  train f1 " << last.f1 << "\n";
      }
      out << "checkpoints written to " << tr_out << "\n";
      return 0;
    }
    if (eval->parsed()) {
      const Dataset ds = load_dataset(ev_data);
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const auto samples = split_or_throw(ds, ev_split);
      MetricsReport rep =
          evaluate_at_times(ck.params, ck.config, samples, parse_times(ev_times), ev_threshold);
      rep.seed = ds.manifest.seed;
      ReportFormat format = fs::path(ev_report).extension() == ".json" ? ReportFormat::json
                                                                       : ReportFormat::csv;
      if (!ev_format.empty()) format = ev_format == "json" ? ReportFormat::json : ReportFormat::csv;
      ensure_parent(ev_report);
      emit_report(rep, ev_report, format);
      out << report_to_csv(rep);
      return 0;
    }
    if (gc->parsed()) {
      ModelConfig model = gc_profile == "paper" ? ModelConfig::paper() : ModelConfig::desk();
      apply_config_file(gc_config, model, nullptr);
      const GradCheckReport r = grad_check_model(model, gc_seed, gc_eps);
      char buf[128];
      std::snprintf(buf, sizeof buf, "max relative error %.3e over %zu parameters\n",
                    r.max_rel_error, r.parameters);
      out << buf;
      return r.max_rel_error < 1e-4 ? 0 : 1;
    }
    if (dm->parsed()) {
      const Dataset ds = load_dataset(dm_data);
      const Checkpoint ck = load_checkpoint(dm_ckpt);
      auto samples = split_or_throw(ds, dm_split);
      if (dm_limit > 0 && samples.size() > dm_limit) samples.resize(dm_limit);
      const MaskDumpSummary s = dump_masks(ck.params, ck.config, samples, dm_out, dm_threshold);
      out << "wrote " << s.files_written << " mask files; mean fraction of frames used: encoder "
          << s.mean_used_fraction_e << ", decoder " << s.mean_used_fraction_d << "\n";
      return 0;
    }
    if (plot->parsed()) {
      std::vector<std::pair<std::string, MetricsReport>> reports;
      for (const auto& p : pl_reports) reports.emplace_back(fs::path(p).stem().string(), load_report(p));
      ensure_parent(pl_out);
      plot_f1_over_time(reports, pl_out);
      out << "wrote " << pl_out << "\n";
      return 0;
    }
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace tamformer
